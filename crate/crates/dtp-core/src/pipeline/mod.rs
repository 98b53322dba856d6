//! End-to-end pipeline: model assembly, synthetic paired data, training,
//! and the stage-ablation study.

pub mod ablate;
pub mod data;
pub mod model;
pub mod train;

pub use ablate::{build_datasets, run_ablation, train_variant, AblationReport, AblationRow};
pub use data::{
    box_downsample, box_upsample, crop, degrade, make_pairs, synthesize_hr, DegradationSpec, Pair,
};
pub use model::{DtpModel, ForwardImages, ForwardTrace, LossTerms, ModelConfig, ModelVariant};
pub use train::{evaluate_model, mean_l1, train, StepLoss, TrainReport, TrainSettings};

use crate::error::{DtpError, Result};

/// Builds the worker pool used for per-patch training sweeps and
/// per-image evaluation. `DTP_THREADS` caps the worker count; results are
/// identical for any cap because every reduction walks items in index
/// order.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(raw) = std::env::var("DTP_THREADS") {
        let n: usize = raw.trim().parse().map_err(|_| {
            DtpError::Config(format!(
                "DTP_THREADS must be a positive integer, got `{raw}`"
            ))
        })?;
        if n == 0 {
            return Err(DtpError::Config(
                "DTP_THREADS must be a positive integer, got `0`".into(),
            ));
        }
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| DtpError::Config(format!("worker pool: {e}")))
}
