//! SwAV pretraining loop.

use rand::seq::SliceRandom;

use crate::augment::{make_views, View};
use crate::config::Config;
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::input::PatchBatch;
use crate::model::SwavModel;
use crate::rng::{domain, keyed};
use crate::swav::{sinkhorn_codes, swav_loss, swav_targets, CollapseMonitor, CollapseStats, EmbeddingQueue};
use crate::tensor::{Graph, LrSchedule, Optimizer, OptimizerKind, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub usage_entropy: f64,
    pub max_fraction: f64,
    pub hard_entropy: f64,
    pub lr: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,loss,usage_entropy,max_fraction,hard_entropy,lr";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.8},{:.8},{:.8},{:.8},{:.8e}",
            self.epoch, self.loss, self.usage_entropy, self.max_fraction, self.hard_entropy, self.lr
        )
    }
}

pub fn logs_to_csv(logs: &[EpochLog]) -> String {
    let mut s = String::from(EpochLog::CSV_HEADER);
    s.push('\n');
    for l in logs {
        s.push_str(&l.csv_row());
        s.push('\n');
    }
    s
}

/// Views of every sample in `batch`, grouped per sample.
pub fn sample_views(cfg: &Config, batch: &[&Sample], seed: u64, epoch: u64) -> Result<Vec<Vec<View>>> {
    let modality_of: Vec<usize> = cfg.data.band_specs().iter().map(|b| b.modality).collect();
    batch
        .iter()
        .map(|s| {
            let bands: Vec<&[f32]> = s.bands.iter().map(Vec::as_slice).collect();
            make_views(
                &bands,
                &modality_of,
                &cfg.augment,
                cfg.swav.n_global,
                cfg.swav.n_local,
                seed,
                epoch,
                s.id,
            )
        })
        .collect()
}

/// Patchify views in view-major order: row `j·B + b` is view `j` of
/// sample `b`.
pub fn view_major_batch(model: &SwavModel, views: &[Vec<View>]) -> Result<PatchBatch<f32>> {
    let n_views = views.first().map_or(0, Vec::len);
    let mut imgs = Vec::new();
    let mut masks = Vec::new();
    for j in 0..n_views {
        for per_sample in views {
            imgs.push(per_sample[j].band_refs());
            masks.push(per_sample[j].dropped.clone());
        }
    }
    model.encoder.input.patch_batch(&imgs, &masks)
}

fn rows(t: &Tensor<f32>, start: usize, n: usize) -> Result<Tensor<f32>> {
    let k = t.last_dim();
    Tensor::new([n, k], t.data()[start * k..(start + n) * k].to_vec())
}

/// Pretraining state: parameters, optimizer, queue and epoch counter.
#[derive(Debug, Clone)]
pub struct Pretrainer {
    pub cfg: Config,
    pub seed: u64,
    pub store: ParamStore<f32>,
    pub model: SwavModel,
    pub optimizer: Optimizer,
    pub queue: EmbeddingQueue,
    pub epoch: usize,
}

impl Pretrainer {
    /// `n_samples` fixes the cosine schedule length.
    pub fn new(cfg: &Config, seed: u64, n_samples: usize) -> Result<Self> {
        let (store, model) = SwavModel::build(cfg)?;
        let t = &cfg.train;
        if t.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        let steps = (n_samples.div_ceil(t.batch_size) * t.epochs) as u64;
        let kind = match t.optimizer.as_str() {
            "adam" => OptimizerKind::adam(),
            _ => OptimizerKind::SgdMomentum { momentum: t.momentum },
        };
        let optimizer = Optimizer::new(
            kind,
            LrSchedule::Cosine {
                lr0: t.lr,
                lr_min: t.lr_min,
                total_steps: steps.saturating_sub(1),
            },
        );
        let queue = EmbeddingQueue::new(
            cfg.swav.n_global,
            cfg.swav.queue_batches * t.batch_size,
            cfg.model.embed_dim,
        );
        Ok(Self {
            cfg: cfg.clone(),
            seed,
            store,
            model,
            optimizer,
            queue,
            epoch: 0,
        })
    }

    /// One optimizer step on `batch`; returns the loss.
    pub fn step(&mut self, batch: &[&Sample], monitor: &mut CollapseMonitor) -> Result<f64> {
        let cfg = &self.cfg;
        let sw = &cfg.swav;
        let b = batch.len();
        let n_views = sw.n_global + sw.n_local;
        let views = sample_views(cfg, batch, self.seed, self.epoch as u64)?;
        let pb = view_major_batch(&self.model, &views)?;

        let mut g = Graph::new();
        let (z, _) = self.model.embed(&mut g, &self.store, &pb)?;
        let protos = g.param(&self.store, self.model.prototypes.id);
        let scores = g.matmul_t(z, protos)?;

        let use_queue = self.epoch >= sw.queue_start_epoch;
        let mut codes = Vec::with_capacity(sw.n_global);
        for i in 0..sw.n_global {
            let current = rows(g.value(scores), i * b, b)?;
            let queued = if use_queue {
                self.queue.rows::<f32>(i).map(|q| q.matmul_t(self.store.value(self.model.prototypes.id)))
            } else {
                None
            }
            .transpose()?;
            let q = sinkhorn_codes(&current, queued.as_ref(), sw.epsilon, sw.sinkhorn_iters)?;
            monitor.add(&q);
            codes.push(q);
        }
        let targets = swav_targets(&codes, n_views)?;
        let loss = swav_loss(&mut g, scores, targets, sw.temperature)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {value} at epoch {}", self.epoch + 1)));
        }
        g.backward_into(loss, &mut self.store)?;
        let norm = if cfg.train.grad_clip > 0.0 {
            self.store.clip_grad_norm(cfg.train.grad_clip)
        } else {
            self.store.grad_norm()
        };
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient norm at epoch {}", self.epoch + 1)));
        }
        let frozen = (self.optimizer.steps() as usize) < cfg.train.freeze_prototypes_steps;
        self.store.set_frozen(self.model.prototypes.id, frozen);
        self.optimizer.step(&mut self.store)?;
        self.model.prototypes.normalize(&mut self.store);

        let zv = g.value(z);
        for i in 0..sw.n_global {
            self.queue.push(i, &rows(zv, i * b, b)?)?;
        }
        Ok(value)
    }

    /// Shuffled pass over `samples`.
    pub fn run_epoch(&mut self, samples: &[Sample]) -> Result<EpochLog> {
        if samples.is_empty() {
            return Err(Error::Data("pretraining needs at least one sample".into()));
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut keyed([self.seed, domain::SHUFFLE, self.epoch as u64, 0]));
        let mut monitor = CollapseMonitor::new(self.cfg.swav.prototypes);
        let lr = self.optimizer.current_lr();
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(self.cfg.train.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            total += self.step(&batch, &mut monitor)?;
            steps += 1;
        }
        self.epoch += 1;
        let CollapseStats {
            usage_entropy,
            max_fraction,
            hard_entropy,
        } = monitor.stats();
        Ok(EpochLog {
            epoch: self.epoch,
            loss: total / steps as f64,
            usage_entropy,
            max_fraction,
            hard_entropy,
            lr,
        })
    }
}
