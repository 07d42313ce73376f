//! Distortion ablation: trains the graph-bottleneck variant and the plain
//! convolutional baseline on the same fisheye-warped synthetic dataset with
//! the same seed, evaluates both, and writes a comparison report. The mIoU
//! delta is recorded as an observation, not asserted.

use std::path::{Path, PathBuf};

use serde::Serialize;

use ugnn_core::data::{self, FisheyeParams, Sample};
use ugnn_core::model::{Aggregation, BottleneckConfig, ModelConfig, Variant};
use ugnn_core::{Error, Result};

use crate::config::{LossKind, RunConfig};
use crate::eval::{evaluate, EvalReport};
use crate::train::Trainer;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct BenchmarkSettings {
    pub seed: u64,
    pub image_size: usize,
    pub num_classes: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub epochs: usize,
    pub fisheye_focal: f64,
}

impl Default for BenchmarkSettings {
    fn default() -> Self {
        BenchmarkSettings {
            seed: 7,
            image_size: 32,
            num_classes: 3,
            train_samples: 8,
            eval_samples: 4,
            epochs: 20,
            fisheye_focal: 12.0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantResult {
    pub variant: String,
    pub final_train_loss: f64,
    pub macro_miou: f64,
    pub frequency_weighted_miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub benchmark: &'static str,
    pub settings: BenchmarkSettings,
    pub unet_gnn: VariantResult,
    pub unet_baseline: VariantResult,
    /// unet_gnn macro mIoU minus unet_baseline macro mIoU (observed).
    pub macro_miou_delta: f64,
}

impl AblationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn benchmark_model_config(settings: &BenchmarkSettings, variant: Variant) -> ModelConfig {
    ModelConfig {
        in_channels: 3,
        num_classes: settings.num_classes,
        depth: 2,
        base_channels: 8,
        bottleneck: BottleneckConfig {
            k: 8,
            num_gnn_layers: 2,
            d_pe: 16,
            learnable_warp: false,
            aggregation: Aggregation::Sum,
        },
        variant,
    }
}

/// Builds the warped benchmark data: synthetic shapes pushed through the
/// equidistant fisheye model, split into train and eval.
pub fn benchmark_data(settings: &BenchmarkSettings) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let total = settings.train_samples + settings.eval_samples;
    let clean = data::synth_shapes(
        settings.seed,
        total,
        settings.image_size,
        settings.num_classes,
    )?;
    let params = FisheyeParams::centered(
        settings.image_size,
        settings.image_size,
        settings.fisheye_focal as ugnn_core::Real,
    );
    let warped: Vec<Sample> = clean
        .iter()
        .map(|s| data::fisheye_warp(s, &params))
        .collect::<Result<_>>()?;
    let mut train = warped;
    let eval = train.split_off(settings.train_samples);
    Ok((train, eval))
}

fn run_variant(
    settings: &BenchmarkSettings,
    variant: Variant,
    train: &[Sample],
    eval_set: &[Sample],
) -> Result<VariantResult> {
    let mut cfg = RunConfig::default();
    cfg.model = benchmark_model_config(settings, variant);
    cfg.image_size = settings.image_size;
    cfg.epochs = settings.epochs;
    cfg.batch_size = 4;
    cfg.seed = settings.seed;
    cfg.loss = LossKind::CrossEntropy;
    let mut trainer = Trainer::new(cfg, train.to_vec())?;
    let mut final_loss = f64::NAN;
    for _ in 0..settings.epochs {
        final_loss = trainer.run_epoch()?.mean_loss;
    }
    let cm = evaluate(trainer.model(), eval_set)?;
    let names: Vec<String> = (0..settings.num_classes)
        .map(|i| format!("class{i}"))
        .collect();
    let report = EvalReport::from_confusion(&cm, &names)?;
    Ok(VariantResult {
        variant: variant.as_str().to_string(),
        final_train_loss: final_loss,
        macro_miou: report.macro_miou,
        frequency_weighted_miou: report.frequency_weighted_miou,
        per_class_iou: report.classes.iter().map(|c| c.iou).collect(),
    })
}

/// Runs the full ablation and writes `ablation_report.json` into `out_dir`.
pub fn cmd_report(out_dir: &Path, settings: BenchmarkSettings) -> Result<(AblationReport, PathBuf)> {
    let (train, eval_set) = benchmark_data(&settings)?;
    let unet_gnn = run_variant(&settings, Variant::UnetGnn, &train, &eval_set)?;
    let unet_baseline = run_variant(&settings, Variant::UnetBaseline, &train, &eval_set)?;
    let report = AblationReport {
        benchmark: "fisheye_synthetic_shapes",
        macro_miou_delta: unet_gnn.macro_miou - unet_baseline.macro_miou,
        settings,
        unet_gnn,
        unet_baseline,
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("ablation_report.json");
    std::fs::write(&path, report.to_json()).map_err(|e| Error::io(&path, e))?;
    Ok((report, path))
}
