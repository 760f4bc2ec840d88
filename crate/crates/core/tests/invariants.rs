//! Statistical properties of trained models on small synthetic worlds.

use cirrl::baselines::{train_erm, train_irm, BaselineConfig, BaselineKind};
use cirrl::drig::{center_dataset, CirrlModel, DrigHead, DrigVariant, Weighting};
use cirrl::repr_train::{encode, train_representation, ReprTrainConfig};
use cirrl::robustness::{worst_case_plugin, OracleModel};
use cirrl::scm_gen::{generate_train, DecoderSpec, GenConfig, MultiEnvDataset};
use cirrl::tensor_nn::DenseMatrix;

const SEEDS: u64 = 5;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn small_repr(seed: u64) -> ReprTrainConfig {
    ReprTrainConfig {
        width: 64,
        epochs: 150,
        lr: 1e-3,
        seed,
        ..ReprTrainConfig::default()
    }
}

fn true_latents(data: &MultiEnvDataset) -> Vec<DenseMatrix> {
    data.envs().iter().map(|e| e.z_true.clone().unwrap()).collect()
}

#[test]
fn encoder_means_match_prior_means() {
    let mut per_seed = Vec::new();
    for seed in 0..SEEDS {
        let cfg = GenConfig {
            k: 2,
            d: 10,
            num_envs: 5,
            n_per_env: 1000,
            decoder: DecoderSpec::Polynomial { degree: 2 },
            seed,
            ..GenConfig::default()
        };
        let (_, data) = generate_train(&cfg).unwrap();
        let model = train_representation(&data, &small_repr(seed)).unwrap();
        let codes: Vec<DenseMatrix> = data.envs().iter().map(|e| encode(&model, &e.x).unwrap()).collect();
        let k = model.latent_dim();
        let pooled_sd: Vec<f64> = (0..k)
            .map(|j| {
                let all: Vec<f64> = codes.iter().flat_map(|c| c.column_values(j)).collect();
                let mean = all.iter().sum::<f64>() / all.len() as f64;
                (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64).sqrt()
            })
            .collect();
        let mut worst: f64 = 0.0;
        for (env, c) in data.envs().iter().zip(&codes) {
            let prior = model.prior_law(env.label).unwrap();
            for j in 0..k {
                let enc_mean = c.column_values(j).iter().sum::<f64>() / c.rows() as f64;
                worst = worst.max((enc_mean - prior.mean[j]).abs() / pooled_sd[j]);
            }
        }
        per_seed.push(worst);
    }
    let med = median(per_seed.clone());
    assert!(med <= 0.2, "median standardized gap {med}, per seed {per_seed:?}");
}

#[test]
fn cirrl_plugin_risk_tracks_oracle_and_beats_baselines_in_linear_world() {
    let gamma = 5.0;
    let mut ratio = Vec::new();
    let (mut cirrl, mut erm, mut irm) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..SEEDS {
        let cfg = GenConfig {
            k: 2,
            d: 4,
            num_envs: 5,
            n_per_env: 1000,
            decoder: DecoderSpec::Polynomial { degree: 1 },
            seed,
            ..GenConfig::default()
        };
        let (_, data) = generate_train(&cfg).unwrap();
        let repr_cfg = small_repr(seed);
        let repr = train_representation(&data, &repr_cfg).unwrap();
        let model = CirrlModel::fit(repr, &data, gamma, DrigVariant::FirstOrder, Weighting::Uniform).unwrap();
        let centered = center_dataset(&data, &true_latents(&data), Weighting::Uniform).unwrap();
        let oracle = OracleModel {
            head: DrigHead::fit(&centered, gamma, DrigVariant::FirstOrder).unwrap(),
        };
        let erm_model = train_erm(&data, &BaselineConfig::from_repr(&repr_cfg, BaselineKind::Erm)).unwrap();
        let irm_model =
            train_irm(&data, &BaselineConfig::from_repr(&repr_cfg, BaselineKind::Irm { lambda: 100.0 })).unwrap();
        let c = worst_case_plugin(&model, &data, gamma, Weighting::Uniform).unwrap();
        let o = worst_case_plugin(&oracle, &data, gamma, Weighting::Uniform).unwrap();
        ratio.push(c / o);
        cirrl.push(c);
        erm.push(worst_case_plugin(&erm_model, &data, gamma, Weighting::Uniform).unwrap());
        irm.push(worst_case_plugin(&irm_model, &data, gamma, Weighting::Uniform).unwrap());
    }
    let detail = format!("ratio {ratio:?} cirrl {cirrl:?} erm {erm:?} irm {irm:?}");
    assert!(median(ratio.clone()) <= 1.05, "{detail}");
    assert!(median(cirrl.clone()) <= median(erm.clone()), "{detail}");
    assert!(median(cirrl.clone()) <= median(irm.clone()), "{detail}");
}
