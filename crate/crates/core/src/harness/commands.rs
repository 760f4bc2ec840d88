use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::baselines::{train_erm, train_irm, BaselineConfig, BaselineKind, BaselineModel};
use crate::drig::{center_dataset, CirrlModel, DrigHead};
use crate::error::{CirrlError, Result};
use crate::repr_train::{latent_dim_sweep, train_representation, ElbowRow, ReprModel};
use crate::robustness::{env_mses, mse, ood_mse, plugin_risk, Inputs, OracleModel, Predictor};
use crate::scm_gen::{generate_test, generate_train, GenConfig, MultiEnvDataset, ScmSystem, TestEnv};

use super::config::ExperimentConfig;
use super::io::{load_csv_dataset, load_test_csv, write_dataset_csv, write_test_csv, DatasetManifest, TestManifest};
use super::results::{write_error_log, write_results, ErrorEntry, ResultRow};

/// Environment variable capping the sweep worker pool.
pub const THREADS_ENV: &str = "CIRRL_THREADS";

/// Pool sized by `CIRRL_THREADS` (all cores when unset).
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| CirrlError::InvalidConfig(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| CirrlError::InvalidConfig(format!("thread pool: {e}")))
}

pub fn seed_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.out_dir.join(format!("seed_{seed}"))
}

/// One OOD set with the labels it is reported under.
#[derive(Debug, Clone)]
pub struct TestSet {
    pub eta: Option<f64>,
    pub family: String,
    pub env: TestEnv,
}

#[derive(Debug, Clone)]
pub struct GeneratedSet {
    pub train: MultiEnvDataset,
    pub system: Option<ScmSystem>,
    pub tests: Vec<TestSet>,
    pub errors: Vec<ErrorEntry>,
}

fn file_safe(s: &str) -> String {
    s.replace([':', '/', '\\'], "-")
}

fn write_file(path: &Path, f: impl FnOnce(BufWriter<File>) -> Result<()>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    f(BufWriter::new(File::create(path)?))
}

/// Test environments for every `(η, family)` of the evaluation grid. Infeasible
/// cells are logged and skipped.
pub fn generate_tests(cfg: &ExperimentConfig, gen: &GenConfig, sys: &ScmSystem, seed: u64) -> (Vec<TestSet>, Vec<ErrorEntry>) {
    let mut tests = Vec::new();
    let mut errors = Vec::new();
    for &family in &cfg.evaluation.families {
        for &eta in &cfg.evaluation.etas {
            let c = GenConfig {
                eta,
                noise_family: family,
                ..gen.clone()
            };
            match generate_test(sys, &c, cfg.evaluation.n_test) {
                Ok(env) => tests.push(TestSet {
                    eta: Some(eta),
                    family: family.to_string(),
                    env,
                }),
                Err(e) => errors.push(ErrorEntry {
                    seed,
                    method: "generate".into(),
                    cell: format!("eta={eta} family={family}"),
                    message: e.to_string(),
                }),
            }
        }
    }
    (tests, errors)
}

/// Generates (or loads) the training data and test sets for one seed and
/// writes them with a manifest under `out_dir/seed_<seed>/`.
pub fn cmd_generate(cfg: &ExperimentConfig, seed: u64) -> Result<GeneratedSet> {
    let dir = seed_dir(cfg, seed);
    fs::create_dir_all(&dir)?;
    if let Some(path) = &cfg.data.train_csv {
        let train = load_csv_dataset(path)?;
        let tests = cfg
            .data
            .test_csvs
            .iter()
            .map(|p| {
                let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                Ok(TestSet {
                    eta: None,
                    family: name,
                    env: load_test_csv(p, f64::NAN, crate::scm_gen::NoiseFamily::Gaussian)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok(GeneratedSet {
            train,
            system: None,
            tests,
            errors: Vec::new(),
        });
    }
    let gen = cfg.generation_for(seed);
    let (sys, train) = generate_train(&gen)?;
    write_file(&dir.join("train.csv"), |w| write_dataset_csv(&train, w))?;
    let (tests, errors) = generate_tests(cfg, &gen, &sys, seed);
    let mut manifest = DatasetManifest::new(&gen, &sys);
    let label = train.num_envs();
    for t in &tests {
        let file = format!("test_{}_eta{}.csv", file_safe(&t.family), t.eta.unwrap_or(0.0));
        write_file(&dir.join(&file), |w| write_test_csv(&t.env, label, w))?;
        manifest.tests.push(TestManifest::from_env(&file, label, &t.env));
    }
    fs::write(dir.join("manifest.json"), manifest.to_json()?)?;
    Ok(GeneratedSet {
        train,
        system: Some(sys),
        tests,
        errors,
    })
}

/// Name under which an IRM model is reported.
pub fn irm_method(cfg: &ExperimentConfig, lambda: f64) -> String {
    if cfg.baselines.irm_lambdas.len() == 1 {
        "irm".into()
    } else {
        format!("irm_lambda{lambda}")
    }
}

#[derive(Debug, Clone)]
pub struct TrainedSet {
    pub repr: Option<ReprModel>,
    pub erm: Option<BaselineModel>,
    pub irm: Vec<(f64, Option<BaselineModel>)>,
    pub errors: Vec<ErrorEntry>,
}

fn baseline_config(cfg: &ExperimentConfig, seed: u64, kind: BaselineKind) -> BaselineConfig {
    let mut b = BaselineConfig::from_repr(&cfg.representation_for(seed), kind);
    if kind == BaselineKind::Erm {
        b.dropout_p = cfg.baselines.erm_dropout;
    }
    b
}

fn record<T>(res: Result<T>, seed: u64, method: &str, errors: &mut Vec<ErrorEntry>) -> Option<T> {
    match res {
        Ok(v) => Some(v),
        Err(e) => {
            errors.push(ErrorEntry {
                seed,
                method: method.into(),
                cell: "train".into(),
                message: e.in_method(method).to_string(),
            });
            None
        }
    }
}

/// Trains the representation and all baselines for one seed and writes
/// checkpoints plus per-epoch traces. Failures are logged per method.
pub fn cmd_train(cfg: &ExperimentConfig, seed: u64, data: &MultiEnvDataset) -> Result<TrainedSet> {
    let dir = seed_dir(cfg, seed);
    fs::create_dir_all(&dir)?;
    let mut errors = Vec::new();
    let repr = record(train_representation(data, &cfg.representation_for(seed)), seed, "cirrl", &mut errors);
    if let Some(m) = &repr {
        fs::write(dir.join("repr.json"), m.to_json()?)?;
        fs::write(dir.join("repr_trace.csv"), m.trace_csv()?)?;
    }
    let save = |name: &str, m: &BaselineModel| -> Result<()> {
        fs::write(dir.join(format!("{name}.json")), m.to_json()?)?;
        let mut trace = String::from("epoch,loss\n");
        for (i, l) in m.trace.iter().enumerate() {
            trace.push_str(&format!("{},{l}\n", i + 1));
        }
        fs::write(dir.join(format!("{name}_trace.csv")), trace)?;
        Ok(())
    };
    let erm = if cfg.baselines.erm {
        record(train_erm(data, &baseline_config(cfg, seed, BaselineKind::Erm)), seed, "erm", &mut errors)
    } else {
        None
    };
    if let Some(m) = &erm {
        save("erm", m)?;
    }
    let mut irm = Vec::new();
    for &lambda in &cfg.baselines.irm_lambdas {
        let name = irm_method(cfg, lambda);
        let m = record(train_irm(data, &baseline_config(cfg, seed, BaselineKind::Irm { lambda })), seed, &name, &mut errors);
        if let Some(m) = &m {
            save(&name, m)?;
        }
        irm.push((lambda, m));
    }
    Ok(TrainedSet { repr, erm, irm, errors })
}

/// Reads the checkpoints written by [`cmd_train`].
pub fn load_trained(cfg: &ExperimentConfig, seed: u64) -> Result<TrainedSet> {
    let dir = seed_dir(cfg, seed);
    let read = |name: &str| -> Result<Option<String>> {
        let p = dir.join(name);
        if p.exists() {
            Ok(Some(fs::read_to_string(p)?))
        } else {
            Ok(None)
        }
    };
    let repr = read("repr.json")?.map(|t| ReprModel::from_json(&t)).transpose()?;
    let erm = read("erm.json")?.map(|t| BaselineModel::from_json(&t)).transpose()?;
    let irm = cfg
        .baselines
        .irm_lambdas
        .iter()
        .map(|&l| Ok((l, read(&format!("{}.json", irm_method(cfg, l)))?.map(|t| BaselineModel::from_json(&t)).transpose()?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainedSet {
        repr,
        erm,
        irm,
        errors: Vec::new(),
    })
}

/// Metric names of one `(method, γ)` cell, in emission order.
fn cell_metrics(data: &MultiEnvDataset) -> Vec<String> {
    let mut m = vec!["train_mse".to_string(), "plugin_risk".to_string()];
    m.extend(data.labels().iter().map(|l| format!("env_mse_{l}")));
    m
}

fn evaluate_cell(
    model: &dyn Predictor,
    data: &MultiEnvDataset,
    weights: &[f64],
    gamma: f64,
    tests: &[TestSet],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let env = env_mses(model, data)?;
    let (x, y, _) = data.pooled();
    let z = data.envs()[0].z_true.as_ref().map(|_| {
        let blocks: Vec<&_> = data.envs().iter().map(|e| e.z_true.as_ref().expect("validated")).collect();
        crate::tensor_nn::DenseMatrix::vstack(&blocks).expect("validated")
    });
    let pooled = model.predict_raw(Inputs { x: &x, z: z.as_ref() })?;
    let mut values = vec![mse(&pooled, &y)?, plugin_risk(&env, weights, gamma)?];
    values.extend(env);
    let ood = tests.iter().map(|t| ood_mse(model, &t.env)).collect::<Result<Vec<_>>>()?;
    Ok((values, ood))
}

/// Fits DRIG per γ on the learned (and, when available, true) latents and
/// evaluates all methods. Failed cells become NaN rows plus an error entry.
pub fn cmd_evaluate(cfg: &ExperimentConfig, seed: u64, generated: &GeneratedSet, trained: &TrainedSet) -> (Vec<ResultRow>, Vec<ErrorEntry>) {
    let data = &generated.train;
    let sizes: Vec<usize> = data.envs().iter().map(|e| e.n()).collect();
    let weights = cfg.drig.weighting.weights(&sizes);
    let metrics = cell_metrics(data);
    let mut errors = Vec::new();
    let mut rows = Vec::new();

    enum Source<'a> {
        Cirrl(&'a ReprModel),
        Oracle,
        Baseline(&'a BaselineModel),
        Missing,
    }
    let mut methods: Vec<(String, Source)> = vec![(
        "cirrl".into(),
        trained.repr.as_ref().map_or(Source::Missing, Source::Cirrl),
    )];
    if cfg.evaluation.oracle && data.latent_dim().is_some() {
        methods.push(("oracle".into(), Source::Oracle));
    }
    if cfg.baselines.erm {
        methods.push(("erm".into(), trained.erm.as_ref().map_or(Source::Missing, Source::Baseline)));
    }
    for (lambda, m) in &trained.irm {
        methods.push((irm_method(cfg, *lambda), m.as_ref().map_or(Source::Missing, Source::Baseline)));
    }
    let true_latents: Option<Vec<_>> = data.envs().iter().map(|e| e.z_true.clone()).collect();

    let cells: Vec<(usize, f64)> = (0..methods.len())
        .flat_map(|m| cfg.drig.gammas.iter().map(move |&g| (m, g)))
        .collect();
    let outcomes: Vec<Result<(Vec<f64>, Vec<f64>)>> = cells
        .par_iter()
        .map(|&(mi, gamma)| {
            let (name, source) = &methods[mi];
            let run = || -> Result<(Vec<f64>, Vec<f64>)> {
                match source {
                    Source::Cirrl(repr) => {
                        let model = CirrlModel::fit((*repr).clone(), data, gamma, cfg.drig.variant, cfg.drig.weighting)?;
                        evaluate_cell(&model, data, &weights, gamma, &generated.tests)
                    }
                    Source::Oracle => {
                        let z = true_latents.as_ref().expect("latents checked");
                        let centered = center_dataset(data, z, cfg.drig.weighting)?;
                        let model = OracleModel {
                            head: DrigHead::fit(&centered, gamma, cfg.drig.variant)?,
                        };
                        evaluate_cell(&model, data, &weights, gamma, &generated.tests)
                    }
                    Source::Baseline(m) => evaluate_cell(*m, data, &weights, gamma, &generated.tests),
                    Source::Missing => Err(CirrlError::Contract("no trained model".into())),
                }
            };
            run().map_err(|e| e.in_method(name.clone()))
        })
        .collect();

    for (&(mi, gamma), outcome) in cells.iter().zip(outcomes) {
        let method = &methods[mi].0;
        let (values, ood) = match outcome {
            Ok(v) => v,
            Err(e) => {
                errors.push(ErrorEntry {
                    seed,
                    method: method.clone(),
                    cell: format!("gamma={gamma}"),
                    message: e.to_string(),
                });
                (vec![f64::NAN; metrics.len()], vec![f64::NAN; generated.tests.len()])
            }
        };
        let base = ResultRow {
            run_id: cfg.run_id.clone(),
            seed,
            method: method.clone(),
            gamma: Some(gamma),
            eta: None,
            family: None,
            metric: String::new(),
            value: f64::NAN,
        };
        for (metric, value) in metrics.iter().zip(values) {
            rows.push(ResultRow {
                metric: metric.clone(),
                value,
                ..base.clone()
            });
        }
        for (t, value) in generated.tests.iter().zip(ood) {
            rows.push(ResultRow {
                eta: t.eta,
                family: Some(t.family.clone()),
                metric: "ood_mse".into(),
                value,
                ..base.clone()
            });
        }
    }
    rows.push(ResultRow {
        run_id: cfg.run_id.clone(),
        seed,
        method: "cirrl".into(),
        gamma: None,
        eta: None,
        family: None,
        metric: "loss_rl_final".into(),
        value: trained.repr.as_ref().map_or(f64::NAN, |m| m.final_loss.total),
    });
    (rows, errors)
}

/// Final loss per latent dimension, written as `dim,final_loss`.
pub fn cmd_elbow(cfg: &ExperimentConfig, seed: u64, data: &MultiEnvDataset, dims: &[usize]) -> Result<Vec<ElbowRow>> {
    let rows = latent_dim_sweep(data, &cfg.representation_for(seed), dims)?;
    let dir = seed_dir(cfg, seed);
    fs::create_dir_all(&dir)?;
    let mut text = String::from("dim,final_loss\n");
    for r in &rows {
        text.push_str(&format!("{},{}\n", r.dim, r.final_loss));
    }
    fs::write(dir.join("elbow.csv"), text)?;
    Ok(rows)
}

/// Output of a full sweep.
#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub rows: Vec<ResultRow>,
    pub errors: Vec<ErrorEntry>,
    pub results_path: PathBuf,
}

/// Generate, train and evaluate every seed, then write `results.csv` and
/// `errors.log` in canonical order.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<SweepOutput> {
    cfg.validate()?;
    let per_seed: Vec<Result<(Vec<ResultRow>, Vec<ErrorEntry>)>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let generated = cmd_generate(cfg, seed)?;
            let trained = cmd_train(cfg, seed, &generated.train)?;
            let (rows, mut errors) = cmd_evaluate(cfg, seed, &generated, &trained);
            errors.extend(generated.errors.iter().cloned());
            errors.extend(trained.errors.iter().cloned());
            Ok((rows, errors))
        })
        .collect();
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for r in per_seed {
        let (r, e) = r?;
        rows.extend(r);
        errors.extend(e);
    }
    let results_path = cfg.out_dir.join("results.csv");
    write_file(&results_path, |w| write_results(&mut rows, w))?;
    write_file(&cfg.out_dir.join("errors.log"), |w| write_error_log(&mut errors, w))?;
    Ok(SweepOutput {
        rows,
        errors,
        results_path,
    })
}
