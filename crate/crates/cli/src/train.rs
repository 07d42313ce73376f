//! Training loop: adaptive-moment optimizer, seeded epoch shuffling,
//! per-epoch loss/mIoU logging, and rolling checkpoints.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ugnn_core::data::{self, Sample};
use ugnn_core::loss::{self, CostMatrix};
use ugnn_core::metrics::{argmax_channels, ConfusionMatrix, MiouMode};
use ugnn_core::model::{Model, UNetGnnParams};
use ugnn_core::{Error, Real, Result, Tape};

use crate::checkpoint::{self, OptimSnapshot};
use crate::config::{LossKind, OptimConfig, RunConfig};

/// Adaptive moment estimation over the canonical parameter list.
pub struct Adam {
    lr: Real,
    beta1: Real,
    beta2: Real,
    eps: Real,
    step: u64,
    m: Vec<Vec<Real>>,
    v: Vec<Vec<Real>>,
}

impl Adam {
    pub fn new(cfg: &OptimConfig, param_sizes: &[usize]) -> Self {
        Adam {
            lr: cfg.lr as Real,
            beta1: cfg.beta1 as Real,
            beta2: cfg.beta2 as Real,
            eps: cfg.eps as Real,
            step: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update from gradients aligned with the canonical tensor order.
    pub fn apply(&mut self, params: &mut UNetGnnParams, grads: &[Vec<Real>]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (_, tensor)) in params.named_tensors_mut().into_iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = &grads[i];
            for (j, value) in tensor.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *value -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }

    pub fn snapshot(&self) -> OptimSnapshot {
        OptimSnapshot {
            step: self.step,
            m: self.m.iter().map(|v| v.iter().map(|&x| x as f32).collect()).collect(),
            v: self.v.iter().map(|v| v.iter().map(|&x| x as f32).collect()).collect(),
        }
    }

    pub fn restore(&mut self, snap: &OptimSnapshot) -> Result<()> {
        if snap.m.len() != self.m.len() || snap.v.len() != self.v.len() {
            return Err(Error::Format(
                "optimizer snapshot does not match parameter count".to_string(),
            ));
        }
        self.step = snap.step;
        for (dst, src) in self.m.iter_mut().zip(&snap.m) {
            dst.clear();
            dst.extend(src.iter().map(|&x| x as Real));
        }
        for (dst, src) in self.v.iter_mut().zip(&snap.v) {
            dst.clear();
            dst.extend(src.iter().map(|&x| x as Real));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_miou: f64,
}

impl EpochStats {
    pub fn log_line(&self) -> String {
        format!(
            "epoch {:4}  loss {:.6}  miou {:.4}",
            self.epoch, self.mean_loss, self.train_miou
        )
    }
}

/// Owns the model and optimizer for one training run. Fully deterministic
/// per (config, seed): sample order, updates, and logs.
pub struct Trainer {
    config: RunConfig,
    model: Model,
    adam: Adam,
    samples: Vec<Sample>,
    cost_matrix: Option<CostMatrix>,
    epoch: usize,
}

impl Trainer {
    pub fn new(config: RunConfig, samples: Vec<Sample>) -> Result<Self> {
        config.validate()?;
        if samples.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        for s in &samples {
            if s.image.shape()[0] != config.model.in_channels {
                return Err(Error::Data(format!(
                    "sample {} has {} channels, model wants {}",
                    s.id,
                    s.image.shape()[0],
                    config.model.in_channels
                )));
            }
        }
        let cost_matrix = match (config.loss, &config.cost_matrix) {
            (LossKind::Gwd, Some(path)) => {
                let m = CostMatrix::load(path)?;
                if m.num_classes() != config.model.num_classes {
                    return Err(Error::Config(format!(
                        "cost matrix is {0}x{0}, model has {1} classes",
                        m.num_classes(),
                        config.model.num_classes
                    )));
                }
                Some(m)
            }
            _ => None,
        };
        let model = Model::init(config.model.clone(), config.seed)?;
        let sizes: Vec<usize> = model
            .params()
            .named_tensors()
            .iter()
            .map(|(_, t)| t.numel())
            .collect();
        let adam = Adam::new(&config.optim, &sizes);
        Ok(Trainer {
            config,
            model,
            adam,
            samples,
            cost_matrix,
            epoch: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn adam(&self) -> &Adam {
        &self.adam
    }

    pub fn epochs_run(&self) -> usize {
        self.epoch
    }

    /// One pass over the data: seeded shuffle, per-batch averaged gradients,
    /// one optimizer step per batch. Loss and mIoU are measured on the
    /// forward passes of this epoch (before each batch's update).
    pub fn run_epoch(&mut self) -> Result<EpochStats> {
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.config
                .seed
                .wrapping_add((self.epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        );
        order.shuffle(&mut rng);

        let mut loss_total = 0.0f64;
        let mut confusion = ConfusionMatrix::new(self.config.model.num_classes);
        for (batch_idx, batch) in order.chunks(self.config.batch_size).enumerate() {
            let mut grad_accum: Option<Vec<Vec<Real>>> = None;
            for &si in batch {
                let sample = &self.samples[si];
                let mut tape = Tape::new();
                let out = self.model.trace(&mut tape, &sample.image)?;
                let loss_id = match (&self.config.loss, &self.cost_matrix) {
                    (LossKind::Gwd, Some(m)) => {
                        loss::gwd_loss(&mut tape, out.probs, &sample.mask, m)?
                    }
                    _ => loss::cross_entropy(&mut tape, out.probs, &sample.mask)?,
                };
                let loss_value = tape.value(loss_id).item();
                if !loss_value.is_finite() {
                    return Err(Error::Train(format!(
                        "non-finite loss {loss_value} at epoch {} batch {batch_idx} sample {}",
                        self.epoch, sample.id
                    )));
                }
                loss_total += loss_value as f64;
                confusion.accumulate(&argmax_channels(tape.value(out.probs)), &sample.mask)?;

                tape.backward(loss_id)?;
                let grads = out.vars.collect_grads(&tape);
                match &mut grad_accum {
                    None => grad_accum = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (x, y) in a.iter_mut().zip(g) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let mut grads = grad_accum.expect("non-empty batch");
            let inv = 1.0 / batch.len() as Real;
            for g in &mut grads {
                for x in g.iter_mut() {
                    *x *= inv;
                }
            }
            self.adam.apply(self.model.params_mut(), &grads);
        }

        let stats = EpochStats {
            epoch: self.epoch,
            mean_loss: loss_total / self.samples.len() as f64,
            train_miou: confusion.miou(MiouMode::Macro).unwrap_or(0.0),
        };
        self.epoch += 1;
        Ok(stats)
    }
}

pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub final_stats: Option<EpochStats>,
}

/// Runs the configured number of epochs: appends one log line and rewrites
/// the checkpoint after each epoch.
pub fn cmd_train(config: RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let manifest_path = config
        .train_manifest
        .clone()
        .ok_or_else(|| Error::Config("data.train_manifest is required for training".into()))?;
    let manifest = data::DatasetManifest::load(&manifest_path)?;
    if manifest.num_classes != config.model.num_classes {
        return Err(Error::Config(format!(
            "manifest has {} classes, model.num_classes = {}",
            manifest.num_classes, config.model.num_classes
        )));
    }
    let samples = data::load_dataset(&manifest, config.image_size)?;

    std::fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    let log_path = config.out_dir.join("train_log.txt");
    let checkpoint_path = config.out_dir.join("checkpoint.ugnn");
    let mut log = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;

    let epochs = config.epochs;
    let mut trainer = Trainer::new(config, samples)?;
    let mut final_stats = None;
    for _ in 0..epochs {
        let stats = trainer.run_epoch()?;
        writeln!(log, "{}", stats.log_line()).map_err(|e| Error::io(&log_path, e))?;
        save_trainer_checkpoint(&checkpoint_path, &trainer)?;
        final_stats = Some(stats);
    }
    Ok(TrainOutcome {
        checkpoint_path,
        log_path,
        final_stats,
    })
}

pub fn save_trainer_checkpoint(path: &Path, trainer: &Trainer) -> Result<()> {
    checkpoint::save_checkpoint(
        path,
        trainer.config(),
        trainer.model().params(),
        Some(&trainer.adam().snapshot()),
        trainer.epochs_run() as u64,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ugnn_core::model::{BottleneckConfig, ModelConfig};

    fn tiny_run_config(out: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig {
            in_channels: 3,
            num_classes: 2,
            depth: 2,
            base_channels: 2,
            bottleneck: BottleneckConfig {
                k: 4,
                num_gnn_layers: 1,
                d_pe: 4,
                ..BottleneckConfig::default()
            },
            ..ModelConfig::default()
        };
        cfg.image_size = 16;
        cfg.epochs = 2;
        cfg.batch_size = 2;
        cfg.seed = 5;
        cfg.out_dir = out.to_path_buf();
        cfg
    }

    #[test]
    fn zero_lr_leaves_parameters_bitwise_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_run_config(dir.path());
        cfg.optim.lr = 0.0;
        let samples = data::synth_shapes(1, 4, 16, 2).unwrap();
        let mut trainer = Trainer::new(cfg.clone(), samples).unwrap();
        let before: Vec<Vec<u32>> = trainer
            .model()
            .params()
            .named_tensors()
            .iter()
            .map(|(_, t)| t.data().iter().map(|v| (*v as f32).to_bits()).collect())
            .collect();
        trainer.run_epoch().unwrap();
        let after: Vec<Vec<u32>> = trainer
            .model()
            .params()
            .named_tensors()
            .iter()
            .map(|(_, t)| t.data().iter().map(|v| (*v as f32).to_bits()).collect())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn same_seed_same_loss_log() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_run_config(dir.path());
        let samples = data::synth_shapes(2, 4, 16, 2).unwrap();
        let run = |cfg: RunConfig, samples: Vec<Sample>| -> Vec<String> {
            let mut t = Trainer::new(cfg, samples).unwrap();
            (0..2).map(|_| t.run_epoch().unwrap().log_line()).collect()
        };
        let a = run(cfg.clone(), samples.clone());
        let b = run(cfg, samples);
        assert_eq!(a, b);
    }

    #[test]
    fn loss_decreases_on_tiny_overfit() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_run_config(dir.path());
        cfg.epochs = 12;
        let samples = data::synth_shapes(3, 2, 16, 2).unwrap();
        let mut trainer = Trainer::new(cfg, samples).unwrap();
        let first = trainer.run_epoch().unwrap();
        let mut last = first;
        for _ in 0..11 {
            last = trainer.run_epoch().unwrap();
        }
        assert!(
            last.mean_loss < first.mean_loss,
            "loss should fall: {} -> {}",
            first.mean_loss,
            last.mean_loss
        );
    }
}
