//! Synthetic multi-environment data from a linear SCM over latents and
//! response, pushed through a nonlinear decoder into covariate space.

mod dataset;
mod decoder;
mod generate;
mod graph;

pub use dataset::{EnvData, InterventionMoments, MultiEnvDataset};
pub use decoder::{make_decoder, monomial_exponents, DecoderFn, DecoderSpec};
pub use generate::{
    generate_test, generate_train, test_mean, GenConfig, MeanShiftRule, NoiseFamily, ScmSystem, TestEnv,
};
pub use graph::{psd_norm1, sample_dag, total_effect, xi_eta, DagSkeleton, EnvIntervention};
