//! Joint estimation of the spatial blur kernel and spectral response matrix
//! linking a hyperspectral/multispectral image pair, plus the degradation
//! forward model, synthetic data generation, quality metrics, and a coupled
//! nonnegative matrix factorization fusion baseline.

// Validation deliberately writes `!(x > 0.0)` instead of `x <= 0.0`: the
// negated form fails for NaN, the form clippy prefers would let NaN through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cnmf;
pub mod cube;
pub mod degrade;
pub mod error;
pub mod estimator;
pub mod io;
pub mod metrics;
pub mod rng;

pub use cnmf::{
    cnmf_factorization, cnmf_fuse, fold, nmf_multiplicative_step, nmf_objective, unfold,
    CnmfConfig, Factorization,
};
pub use cube::{
    conv2d_bandwise, downsample, frobenius_mse, mode3_product, BoundaryMode, HyperCube, Kernel,
    Matrix, SrfMatrix,
};
pub use degrade::{
    add_gaussian_noise, average_kernel, degrade_scene, gaussian_kernel, spatial_degrade,
    spectral_degrade, synth_scene, synth_scene_components, synth_srf, Geometry, ObservedPair,
    Overlap, SceneComponents, SceneSpec, SrfKind, SrfProfile,
};
pub use error::{Error, Result};
pub use io::{
    read_cube, read_estimation_json, read_kernel_csv, read_matrix_csv, read_metrics_json,
    read_srf_csv, write_cube, write_estimation_json, write_kernel_csv, write_matrix_csv,
    write_metrics_json, write_srf_csv, CubeDtype, EstimationDoc, MetricReportDoc, FORMAT_VERSION,
};
pub use metrics::{
    compute_report, ergas, psnr, psnr_per_band, sam, sid, ssim, ssim_per_band, vector_metrics,
    MetricReport,
};
pub use estimator::{
    adam_step, build_psf, build_srf, data_loss, finite_difference_check, gradcheck_instance,
    gradients, loss_and_gradients, loss_terms, lr_schedule, pretrain_loss, pretrain_srf, sigmoid,
    softplus, stick_breaking, total_loss, train, train_observed, tv_loss, AdamState, BandMask,
    EstimationResult, EstimatorParams, GradBundle, GradCheck, HyperConfig, LossTerms, TraceEntry,
};
pub use rng::Xoshiro256;
