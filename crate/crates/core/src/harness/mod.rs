//! Experiment configuration, dataset files, sweeps and long-format results.

mod commands;
mod config;
mod io;
mod results;

pub use commands::{
    cmd_elbow, cmd_evaluate, cmd_generate, cmd_sweep, cmd_train, generate_tests, irm_method, load_trained, seed_dir,
    worker_pool, GeneratedSet, SweepOutput, TestSet, TrainedSet, THREADS_ENV,
};
pub use config::{BaselineSection, DataSection, DrigSection, EvaluationSection, ExperimentConfig};
pub use io::{
    dataset_from_parsed, load_csv_dataset, load_test_csv, parse_csv, write_dataset_csv, write_test_csv, DatasetManifest,
    ParsedCsv, TestManifest,
};
pub use results::{sort_rows, write_error_log, write_results, ErrorEntry, ResultRow, RESULT_HEADER};
