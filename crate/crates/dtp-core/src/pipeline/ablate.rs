//! Stage-ablation study: trains the eight on/off combinations of the
//! three specialized stages under identical seeds and budgets, evaluates
//! each on the same held-out synthetic pairs, and renders the results as
//! a delimiter-separated table plus an aligned human-readable one, with
//! deltas against the all-off baseline row.

use crate::config::PipelineConfig;
use crate::error::Result;
use crate::pipeline::data::{make_pairs, DegradationSpec, Pair};
use crate::pipeline::model::{DtpModel, ModelConfig, ModelVariant};
use crate::pipeline::train::{evaluate_model, train, TrainReport, TrainSettings};

/// One trained-and-evaluated configuration.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: ModelVariant,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub delta_psnr_db: f64,
    pub delta_ssim: f64,
}

/// The eight rows in report order (baseline, singles, pairs, full).
#[derive(Debug, Clone)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// Builds the shared train/holdout datasets for a configuration. The
/// holdout set uses different content and noise seeds so it never
/// overlaps the training pairs.
pub fn build_datasets(cfg: &PipelineConfig) -> Result<(Vec<Pair>, Vec<Pair>)> {
    let spec = DegradationSpec {
        exposure: cfg.exposure_factor(),
        gamma: cfg.data_gamma,
        noise: cfg.data_noise,
        scale: cfg.csr_scale,
        seed: cfg.data_seed,
    };
    let train_pairs = make_pairs(cfg.data_pairs, cfg.data_hr_size, &spec, cfg.data_seed)?;
    let holdout_spec = DegradationSpec {
        seed: cfg.data_seed.wrapping_add(0x5EED_0FF5),
        ..spec
    };
    let holdout = make_pairs(
        cfg.data_holdout,
        cfg.data_hr_size,
        &holdout_spec,
        cfg.data_seed.wrapping_add(0x4825_51D3),
    )?;
    Ok((train_pairs, holdout))
}

/// Trains one variant from scratch (same seed and budget as every other
/// variant) and returns the trained model with its loss trace.
pub fn train_variant(
    cfg: &PipelineConfig,
    variant: ModelVariant,
    train_pairs: &[Pair],
) -> Result<(DtpModel<f32>, TrainReport)> {
    let model_cfg = ModelConfig::from_pipeline(cfg, variant)?;
    let mut model = DtpModel::new(model_cfg, cfg.train_seed)?;
    let report = train(&mut model, train_pairs, &TrainSettings::from_pipeline(cfg))?;
    Ok((model, report))
}

/// Runs the full eight-row study.
pub fn run_ablation(cfg: &PipelineConfig) -> Result<AblationReport> {
    cfg.validate()?;
    let (train_pairs, holdout) = build_datasets(cfg)?;
    let mut rows = Vec::with_capacity(8);
    for variant in ModelVariant::table_rows() {
        let (model, _) = train_variant(cfg, variant, &train_pairs)?;
        let metrics = evaluate_model(&model, &holdout)?;
        rows.push(AblationRow {
            variant,
            mean_psnr_db: metrics.mean_psnr_db,
            mean_ssim: metrics.mean_ssim,
            delta_psnr_db: 0.0,
            delta_ssim: 0.0,
        });
    }
    let (base_psnr, base_ssim) = (rows[0].mean_psnr_db, rows[0].mean_ssim);
    for row in &mut rows {
        row.delta_psnr_db = row.mean_psnr_db - base_psnr;
        row.delta_ssim = row.mean_ssim - base_ssim;
    }
    Ok(AblationReport { rows })
}

impl AblationReport {
    /// Machine-readable rendering, one row per configuration.
    pub fn render_tsv(&self) -> String {
        let mut out = String::from(
            "variant\tfsd\tsdr\tcsr\tpsnr_db\tssim\tdelta_psnr_db\tdelta_ssim\tlpips\n",
        );
        for row in &self.rows {
            let v = row.variant;
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{:.4}\t{:.6}\t{:+.4}\t{:+.6}\tn/a\n",
                v.label(),
                v.fsd as u8,
                v.sdr as u8,
                v.csr as u8,
                row.mean_psnr_db,
                row.mean_ssim,
                row.delta_psnr_db,
                row.delta_ssim,
            ));
        }
        out
    }

    /// Aligned table for human reading.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<10} {:>4} {:>4} {:>4} {:>9} {:>8} {:>8} {:>8}\n",
            "variant", "fsd", "sdr", "csr", "psnr_db", "ssim", "d_psnr", "d_ssim"
        ));
        for row in &self.rows {
            let mark = |on: bool| if on { "x" } else { "-" };
            let v = row.variant;
            out.push_str(&format!(
                "{:<10} {:>4} {:>4} {:>4} {:>9.3} {:>8.4} {:>+8.3} {:>+8.4}\n",
                v.label(),
                mark(v.fsd),
                mark(v.sdr),
                mark(v.csr),
                row.mean_psnr_db,
                row.mean_ssim,
                row.delta_psnr_db,
                row.delta_ssim,
            ));
        }
        out
    }
}
