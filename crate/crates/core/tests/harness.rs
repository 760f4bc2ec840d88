use std::fs;

use cirrl::harness::{
    cmd_evaluate, cmd_generate, cmd_sweep, cmd_train, write_dataset_csv, write_test_csv, ExperimentConfig, TrainedSet,
};
use cirrl::repr_train::ReprTrainConfig;
use cirrl::scm_gen::{generate_test, generate_train, GenConfig, MeanShiftRule};

fn tiny(out: &std::path::Path) -> ExperimentConfig {
    ExperimentConfig {
        run_id: "t".into(),
        out_dir: out.to_path_buf(),
        generation: GenConfig {
            d: 4,
            num_envs: 3,
            n_per_env: 120,
            ..GenConfig::default()
        },
        representation: ReprTrainConfig {
            width: 8,
            epochs: 3,
            batch_size: 60,
            lr: 1e-3,
            ..ReprTrainConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

#[test]
fn every_cell_of_the_grid_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let out = cmd_sweep(&cfg).unwrap();
    assert!(out.errors.is_empty(), "{:?}", out.errors);
    let methods = ["cirrl", "oracle", "erm", "irm"];
    let tests = cfg.evaluation.etas.len() * cfg.evaluation.families.len();
    // train_mse, plugin_risk, one env_mse per environment, then the OOD sets
    let per_cell = 2 + cfg.generation.num_envs + tests;
    let expected = methods.len() * cfg.drig.gammas.len() * per_cell + 1;
    assert_eq!(out.rows.len(), expected);
    assert!(out.rows.iter().all(|r| r.value.is_finite()));
    assert_eq!(out.rows.iter().filter(|r| r.metric == "loss_rl_final").count(), 1);
}

#[test]
fn missing_models_become_nan_rows_and_log_entries() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let generated = cmd_generate(&cfg, 0).unwrap();
    let mut trained = cmd_train(&cfg, 0, &generated.train).unwrap();
    trained = TrainedSet { repr: None, ..trained };
    let (rows, errors) = cmd_evaluate(&cfg, 0, &generated, &trained);
    let cirrl: Vec<_> = rows.iter().filter(|r| r.method == "cirrl").collect();
    assert!(!cirrl.is_empty());
    assert!(cirrl.iter().all(|r| r.value.is_nan()));
    assert_eq!(errors.len(), cfg.drig.gammas.len());
    assert!(errors.iter().all(|e| e.method == "cirrl" && e.message.contains("no trained model")));
    assert!(rows.iter().filter(|r| r.method == "erm").all(|r| r.value.is_finite()));
}

#[test]
fn infeasible_test_perturbations_are_logged_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.generation.mean_rule = MeanShiftRule::Linear;
    cfg.evaluation.etas = vec![1.0, 1e4];
    let out = cmd_sweep(&cfg).unwrap();
    assert!(!out.errors.is_empty());
    assert!(out.errors.iter().all(|e| e.method == "generate" && e.cell.contains("eta=10000")));
    assert!(out.rows.iter().any(|r| r.eta == Some(1.0)));
    assert!(out.rows.iter().all(|r| r.eta != Some(1e4)));
    let log = fs::read_to_string(dir.path().join("errors.log")).unwrap();
    assert!(log.contains("method=generate"));
}

#[test]
fn sweeps_run_from_csv_files() {
    let dir = tempfile::tempdir().unwrap();
    let gen = GenConfig {
        d: 4,
        num_envs: 3,
        n_per_env: 120,
        ..GenConfig::default()
    };
    let (sys, data) = generate_train(&gen).unwrap();
    let test = generate_test(&sys, &gen, 200).unwrap();
    let train_path = dir.path().join("train.csv");
    let test_path = dir.path().join("shifted.csv");
    write_dataset_csv(&data, fs::File::create(&train_path).unwrap()).unwrap();
    write_test_csv(&test, data.num_envs(), fs::File::create(&test_path).unwrap()).unwrap();

    let mut cfg = tiny(&dir.path().join("out"));
    cfg.data.train_csv = Some(train_path);
    cfg.data.test_csvs = vec![test_path];
    cfg.validate().unwrap();
    let out = cmd_sweep(&cfg).unwrap();
    let ood: Vec<_> = out.rows.iter().filter(|r| r.metric == "ood_mse").collect();
    assert!(!ood.is_empty());
    assert!(ood.iter().all(|r| r.family.as_deref() == Some("shifted") && r.eta.is_none()));
    assert!(ood.iter().all(|r| r.value.is_finite()));
}
