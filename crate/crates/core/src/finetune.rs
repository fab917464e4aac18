//! Two-stage segmentation fine-tuning of a pretrained encoder.
//!
//! Stage 1 trains the decoder alone on top of the frozen encoder; stage 2
//! also unfreezes the band-fusion module. One Adam optimizer with a cosine
//! schedule spans both stages.

use rand::seq::SliceRandom;
use rand::RngCore;

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::fpn::{iou_metrics, mean_metrics, FpnDecoder, SegMetrics};
use crate::init::Init;
use crate::input::PatchBatch;
use crate::model::SwavModel;
use crate::rng::{domain, keyed};
use crate::tensor::{Graph, LrSchedule, Optimizer, OptimizerKind, ParamStore, Tensor, Var};

pub const DECODER_PREFIX: &str = "fpn.";
pub const FUSION_PREFIX: &str = "fusion.";

/// Pretraining model plus the segmentation decoder.
#[derive(Debug, Clone)]
pub struct FinetuneModel {
    pub swav: SwavModel,
    pub decoder: FpnDecoder,
}

impl FinetuneModel {
    /// Registers the pretraining parameters (initialized from
    /// `model.init_seed`) followed by a decoder drawn from `seed`.
    pub fn build(cfg: &Config, seed: u64) -> Result<(ParamStore<f32>, Self)> {
        let (mut store, swav) = SwavModel::build::<f32>(cfg)?;
        let mut init = Init::new(keyed([seed, domain::FINETUNE, 1, 0]).next_u64());
        let prior = 1.0 - cfg.data.label.quantile;
        let decoder = FpnDecoder::new(&mut store, &mut init, &swav.encoder.pyramid.levels, &cfg.fpn, prior)?;
        Ok((store, Self { swav, decoder }))
    }

    /// Model described by a checkpoint's config, with every stored tensor
    /// applied. A checkpoint without decoder tensors keeps the fresh
    /// decoder from `seed`.
    pub fn from_checkpoint(ck: &Checkpoint, seed: u64) -> Result<(Config, ParamStore<f32>, Self)> {
        let cfg = ck.config()?;
        let (mut store, model) = Self::build(&cfg, seed)?;
        ck.apply_to(&mut store)?;
        Ok((cfg, store, model))
    }

    pub fn has_decoder(ck: &Checkpoint) -> bool {
        ck.tensors.iter().any(|t| t.name.starts_with(DECODER_PREFIX))
    }

    /// Patch batch of whole samples with `dropped` bands removed.
    pub fn batch(&self, samples: &[&Sample], dropped: &[bool]) -> Result<PatchBatch<f32>> {
        let imgs: Vec<Vec<Option<&[f32]>>> = samples
            .iter()
            .map(|s| {
                s.bands
                    .iter()
                    .zip(dropped)
                    .map(|(b, &d)| (!d).then_some(b.as_slice()))
                    .collect()
            })
            .collect();
        let masks = vec![dropped.to_vec(); samples.len()];
        self.swav.encoder.input.patch_batch(&imgs, &masks)
    }

    /// Pyramid grids of the encoder.
    pub fn grids(&self, g: &mut Graph<f32>, store: &ParamStore<f32>, batch: &PatchBatch<f32>) -> Result<Vec<Var>> {
        Ok(self.swav.encoder.forward(g, store, batch)?.pyramid.grids)
    }

    /// Probability maps `(B, side²)`.
    pub fn predict(&self, store: &ParamStore<f32>, samples: &[&Sample], dropped: &[bool]) -> Result<Tensor<f32>> {
        let batch = self.batch(samples, dropped)?;
        let mut g = Graph::new();
        let grids = self.grids(&mut g, store, &batch)?;
        let p = self.decoder.forward(&mut g, store, &grids)?;
        Ok(g.value(p).clone())
    }
}

/// Label of `s`, checked against the decoder output side.
pub fn checked_label(s: &Sample, side: usize) -> Result<&[f32]> {
    let label = s
        .label
        .as_deref()
        .ok_or_else(|| Error::Data(format!("sample {} has no segmentation label", s.id)))?;
    if label.len() != side * side {
        return Err(Error::Geometry(format!(
            "sample {} label has {} pixels, decoder outputs {side}×{side}",
            s.id,
            label.len()
        )));
    }
    Ok(label)
}

/// Per-sample metrics of the model on `samples`.
pub fn evaluate(
    model: &FinetuneModel,
    store: &ParamStore<f32>,
    cfg: &Config,
    samples: &[Sample],
    dropped: &[bool],
) -> Result<Vec<SegMetrics>> {
    let side = cfg.fpn.output_side;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(cfg.fpn.batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let probs = model.predict(store, &refs, dropped)?;
        for (i, s) in chunk.iter().enumerate() {
            let label = checked_label(s, side)?;
            out.push(iou_metrics(probs.row(i), label, cfg.fpn.threshold)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneLog {
    pub epoch: usize,
    pub stage: usize,
    pub loss: f64,
    /// Validation metrics averaged over samples.
    pub val: SegMetrics,
    pub lr: f64,
    pub trainable: usize,
}

impl FinetuneLog {
    pub const CSV_HEADER: &'static str = "epoch,stage,loss,accuracy,fg_iou,bg_iou,lr,trainable";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.8},{:.8},{:.8},{:.8},{:.8e},{}",
            self.epoch, self.stage, self.loss, self.val.accuracy, self.val.fg_iou, self.val.bg_iou, self.lr, self.trainable
        )
    }
}

pub fn finetune_logs_to_csv(logs: &[FinetuneLog]) -> String {
    let mut s = String::from(FinetuneLog::CSV_HEADER);
    s.push('\n');
    for l in logs {
        s.push_str(&l.csv_row());
        s.push('\n');
    }
    s
}

/// Fine-tuning state for one band subset.
#[derive(Debug, Clone)]
pub struct Finetuner {
    pub cfg: Config,
    pub seed: u64,
    /// Bands hidden from the encoder for the whole run.
    pub dropped: Vec<bool>,
    pub store: ParamStore<f32>,
    pub model: FinetuneModel,
    pub optimizer: Optimizer,
    pub epoch: usize,
    /// Frozen-encoder grids of the training samples, filled on the first
    /// stage-1 epoch.
    cache: Option<Vec<Vec<Tensor<f32>>>>,
}

impl Finetuner {
    /// `n_train` fixes the schedule length: the last step of stage 2 runs
    /// at `fpn.lr_min`.
    pub fn new(
        cfg: &Config,
        seed: u64,
        store: ParamStore<f32>,
        model: FinetuneModel,
        dropped: Vec<bool>,
        n_train: usize,
    ) -> Result<Self> {
        let f = &cfg.fpn;
        if f.batch_size == 0 || f.stage1_epochs == 0 || f.stage2_epochs == 0 {
            return Err(Error::Config("fine-tuning needs a positive batch size and stage lengths".into()));
        }
        if dropped.len() != model.swav.encoder.input.n_bands() || dropped.iter().all(|&d| d) {
            return Err(Error::Config("drop mask must cover every band and keep at least one".into()));
        }
        let steps = (n_train.div_ceil(f.batch_size) * (f.stage1_epochs + f.stage2_epochs)) as u64;
        let optimizer = Optimizer::new(
            OptimizerKind::adam(),
            LrSchedule::Cosine {
                lr0: f.lr0,
                lr_min: f.lr_min,
                total_steps: steps.saturating_sub(1),
            },
        );
        Ok(Self {
            cfg: cfg.clone(),
            seed,
            dropped,
            store,
            model,
            optimizer,
            epoch: 0,
            cache: None,
        })
    }

    /// Stage (1 or 2) of the next epoch.
    pub fn stage(&self) -> usize {
        if self.epoch < self.cfg.fpn.stage1_epochs {
            1
        } else {
            2
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.cfg.fpn.stage1_epochs + self.cfg.fpn.stage2_epochs
    }

    /// Freeze everything except the decoder, plus the fusion module in
    /// stage 2; returns the trainable scalar count.
    pub fn apply_freezing(&mut self, stage: usize) -> usize {
        self.store.freeze_all();
        self.store.set_frozen_prefix(DECODER_PREFIX, false);
        if stage >= 2 {
            self.store.set_frozen_prefix(FUSION_PREFIX, false);
        }
        self.store.trainable_count()
    }

    fn fill_cache(&mut self, train: &[Sample]) -> Result<()> {
        let mut cache = Vec::with_capacity(train.len());
        for chunk in train.chunks(self.cfg.fpn.batch_size) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let batch = self.model.batch(&refs, &self.dropped)?;
            let mut g = Graph::new();
            let grids = self.model.grids(&mut g, &self.store, &batch)?;
            for i in 0..chunk.len() {
                cache.push(grids.iter().map(|&v| g.value(v).index0(i)).collect());
            }
        }
        self.cache = Some(cache);
        Ok(())
    }

    fn labels(&self, batch: &[&Sample]) -> Result<Tensor<f32>> {
        let side = self.cfg.fpn.output_side;
        let mut data = Vec::with_capacity(batch.len() * side * side);
        for s in batch {
            data.extend_from_slice(checked_label(s, side)?);
        }
        Tensor::new([batch.len(), side * side], data)
    }

    fn step(&mut self, train: &[Sample], idx: &[usize], stage: usize) -> Result<f64> {
        let batch: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
        let target = self.labels(&batch)?;
        let mut g = Graph::new();
        let grids = match (&self.cache, stage) {
            (Some(cache), 1) => {
                let n_levels = cache[idx[0]].len();
                (0..n_levels)
                    .map(|l| {
                        let parts: Vec<Tensor<f32>> = idx.iter().map(|&i| cache[i][l].clone()).collect();
                        Ok(g.input(Tensor::stack0(&parts)?))
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            _ => {
                let pb = self.model.batch(&batch, &self.dropped)?;
                self.model.grids(&mut g, &self.store, &pb)?
            }
        };
        let logits = self.model.decoder.logits(&mut g, &self.store, &grids)?;
        let loss = g.bce_with_logits(logits, target)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite fine-tuning loss at epoch {}", self.epoch + 1)));
        }
        g.backward_into(loss, &mut self.store)?;
        self.optimizer.step(&mut self.store)?;
        Ok(value)
    }

    /// One shuffled pass over `train`, then validation on `val`.
    pub fn run_epoch(&mut self, train: &[Sample], val: &[Sample]) -> Result<FinetuneLog> {
        if train.is_empty() {
            return Err(Error::Data("fine-tuning needs at least one training sample".into()));
        }
        let stage = self.stage();
        let trainable = self.apply_freezing(stage);
        if stage == 1 && self.cache.is_none() {
            self.fill_cache(train)?;
        }
        if stage == 2 {
            self.cache = None;
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut keyed([self.seed, domain::FINETUNE, 0, self.epoch as u64]));
        let lr = self.optimizer.current_lr();
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(self.cfg.fpn.batch_size) {
            total += self.step(train, chunk, stage)?;
            steps += 1;
        }
        self.epoch += 1;
        let val = mean_metrics(&evaluate(&self.model, &self.store, &self.cfg, val, &self.dropped)?);
        Ok(FinetuneLog {
            epoch: self.epoch,
            stage,
            loss: total / steps as f64,
            val,
            lr,
            trainable,
        })
    }

    /// Both stages.
    pub fn run(&mut self, train: &[Sample], val: &[Sample]) -> Result<Vec<FinetuneLog>> {
        (self.epoch..self.total_epochs()).map(|_| self.run_epoch(train, val)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_sample;

    fn labelled(cfg: &Config, ids: std::ops::Range<u64>) -> Vec<Sample> {
        ids.map(|i| {
            let r = generate_sample(&cfg.data, 11, i).unwrap();
            Sample {
                id: i,
                bands: r.bands().map(|b| b.data.clone()).collect(),
                label: r.label().map(|l| l.data.clone()),
            }
        })
        .collect()
    }

    fn tiny() -> Config {
        let mut cfg = Config::desk();
        cfg.fpn.stage1_epochs = 1;
        cfg.fpn.stage2_epochs = 1;
        cfg.fpn.batch_size = 4;
        cfg
    }

    fn snapshot(store: &ParamStore<f32>) -> Vec<(String, Vec<f32>)> {
        store.iter().map(|(_, p)| (p.name.clone(), p.value.data().to_vec())).collect()
    }

    #[test]
    fn stages_touch_only_their_parameters() {
        let cfg = tiny();
        let data = labelled(&cfg, 0..6);
        let (store, model) = FinetuneModel::build(&cfg, 0).unwrap();
        let mut ft = Finetuner::new(&cfg, 0, store, model, vec![false; 7], 6).unwrap();
        let before = snapshot(&ft.store);
        let l1 = ft.run_epoch(&data, &data[..2]).unwrap();
        let mid = snapshot(&ft.store);
        let l2 = ft.run_epoch(&data, &data[..2]).unwrap();
        let after = snapshot(&ft.store);
        assert_eq!((l1.stage, l2.stage), (1, 2));
        assert!(l1.trainable < l2.trainable);
        for ((name, a), ((_, b), (_, c))) in before.iter().zip(mid.iter().zip(&after)) {
            let dec = name.starts_with(DECODER_PREFIX);
            let fus = name.starts_with(FUSION_PREFIX);
            if !dec {
                assert_eq!(a, b, "{name} changed in stage 1");
            }
            if !dec && !fus {
                assert_eq!(b, c, "{name} changed in stage 2");
            }
        }
        assert!(before.iter().zip(&after).any(|((n, a), (_, c))| n.starts_with(FUSION_PREFIX) && a != c));
        assert_eq!(l1.lr, cfg.fpn.lr0);
        assert_eq!(ft.optimizer.schedule.lr(ft.optimizer.steps() - 1), cfg.fpn.lr_min);
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = tiny();
        let data = labelled(&cfg, 0..4);
        let run = || {
            let (store, model) = FinetuneModel::build(&cfg, 3).unwrap();
            let mut ft = Finetuner::new(&cfg, 3, store, model, vec![false; 7], 4).unwrap();
            finetune_logs_to_csv(&ft.run(&data, &data).unwrap())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn label_problems_are_reported() {
        let cfg = tiny();
        let mut data = labelled(&cfg, 0..2);
        let (store, model) = FinetuneModel::build(&cfg, 0).unwrap();
        let mut ft = Finetuner::new(&cfg, 0, store, model, vec![false; 7], 2).unwrap();
        data[1].label.as_mut().unwrap().pop();
        assert!(matches!(ft.run_epoch(&data, &[]), Err(Error::Geometry(_))));
        data[1].label = None;
        assert!(matches!(ft.run_epoch(&data, &[]), Err(Error::Data(_))));
    }

    #[test]
    fn checkpoint_restores_decoder() {
        let cfg = tiny();
        let data = labelled(&cfg, 0..2);
        let (store, model) = FinetuneModel::build(&cfg, 5).unwrap();
        let ck = Checkpoint::from_store(&cfg, &store);
        assert!(FinetuneModel::has_decoder(&ck));
        let (_, restored, m2) = FinetuneModel::from_checkpoint(&ck, 99).unwrap();
        let refs: Vec<&Sample> = data.iter().collect();
        let a = model.predict(&store, &refs, &[false; 7]).unwrap();
        let b = m2.predict(&restored, &refs, &[false; 7]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[2, 32 * 32]);
    }
}
