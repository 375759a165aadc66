//! Stage II: MLP classifier on top of the (usually frozen) encoder, trained
//! with weighted cross-entropy and selected by validation EER.

use std::fs::File;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::Selection;
use crate::autodiff::{Adam, AdamConfig, Gradients, Graph, NormMode, ParamId, ParamStore, Tensor, Var};
use crate::backbone::{Backbone, BACKBONE_PREFIX};
use crate::checkpoint::Checkpoint;
use crate::config::{ModelSnapshot, RunConfig, Stage};
use crate::error::{Error, Result};
use crate::frontend::LogMelSpectrogram;
use crate::manifest::{Dataset, Label};
use crate::metrics::{compute_eer, ScoreRecord};
use crate::parallel::try_map_range;
use crate::pipeline::FeaturePipeline;
use crate::rng::RngStream;
use crate::stage1::{apply_update, best_checkpoint_path, epoch_checkpoint_path, select_best, step_decay, GRAD_CHUNK};

pub(crate) const STREAM_HEAD_INIT: u64 = 11;
pub(crate) const STREAM_SAMPLE: u64 = 12;
pub(crate) const STREAM_SHUFFLE: u64 = 13;

/// Floor applied to probabilities before the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    /// Loss weights for (bonafide, spoof).
    pub class_weights: [f64; 2],
    pub hidden_dim: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay_gamma: f64,
    pub lr_decay_every: usize,
    /// Keep the encoder fixed; `false` trains it jointly with the head.
    pub freeze_backbone: bool,
    /// Per-augmentation probability on training samples.
    pub aug_probability: f64,
    pub augment: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub grad_clip: f64,
    pub init_std: f64,
    pub adam: AdamConfig,
    /// Shuffle the training order each epoch (manifest order otherwise).
    pub shuffle: bool,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            class_weights: [0.9, 0.1],
            hidden_dim: 128,
            batch_size: 64,
            epochs: 50,
            lr: 1e-4,
            lr_decay_gamma: 0.95,
            lr_decay_every: 5,
            freeze_backbone: true,
            aug_probability: 0.8,
            augment: true,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            grad_clip: 5.0,
            init_std: 0.02,
            adam: AdamConfig::default(),
            shuffle: false,
            seed: 0,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("stage2: {m}")));
        if !self.class_weights.iter().all(|w| *w > 0.0 && w.is_finite()) {
            return bad("class weights must be positive");
        }
        if self.hidden_dim == 0 || self.batch_size < 2 || self.epochs == 0 || self.lr_decay_every == 0 {
            return bad("hidden_dim, epochs and lr_decay_every must be positive and batch_size at least 2");
        }
        if !(self.lr > 0.0 && self.lr_decay_gamma > 0.0 && self.bn_eps > 0.0) {
            return bad("lr, lr_decay_gamma and bn_eps must be positive");
        }
        if !(0.0..=1.0).contains(&self.aug_probability) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("aug_probability and bn_momentum must be in [0, 1]");
        }
        if self.grad_clip < 0.0 || self.init_std < 0.0 {
            return bad("grad_clip and init_std must be nonnegative");
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        step_decay(self.lr, self.lr_decay_gamma, self.lr_decay_every, epoch)
    }
}

/// `-w[label] · log max(p[label], floor)`.
pub fn weighted_ce(probs: [f64; 2], label: Label, weights: [f64; 2]) -> f64 {
    let k = label.index();
    -weights[k] * probs[k].max(PROB_FLOOR).ln()
}

/// `Linear(embed → hidden) → BatchNorm → ReLU → Linear(hidden → 2) → softmax`.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    fc1_w: ParamId,
    fc1_b: ParamId,
    bn_w: ParamId,
    bn_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
    bn_eps: f64,
}

pub const HEAD_PREFIX: &str = "head.";
const RUNNING_MEAN: &str = "head.bn.running_mean";
const RUNNING_VAR: &str = "head.bn.running_var";

impl ClassifierHead {
    pub fn init(embed_dim: usize, cfg: &Stage2Config, store: &mut ParamStore<f32>, rng: &mut impl Rng) -> Result<Self> {
        let h = cfg.hidden_dim;
        let normal = rand_distr::Normal::new(0.0, cfg.init_std.max(f64::MIN_POSITIVE)).expect("valid std");
        let mut random = |n: usize| -> Vec<f32> {
            (0..n)
                .map(|_| {
                    let v: f64 = rand_distr::Distribution::sample(&normal, rng);
                    v.clamp(-2.0 * cfg.init_std, 2.0 * cfg.init_std) as f32
                })
                .collect()
        };
        let fc1_w = store.add("head.fc1.weight", Tensor::new(vec![embed_dim, h], random(embed_dim * h))?)?;
        let fc1_b = store.add("head.fc1.bias", Tensor::zeros(vec![h]))?;
        let bn_w = store.add("head.bn.weight", Tensor::full(vec![h], 1.0))?;
        let bn_b = store.add("head.bn.bias", Tensor::zeros(vec![h]))?;
        let fc2_w = store.add("head.fc2.weight", Tensor::new(vec![h, 2], random(h * 2))?)?;
        let fc2_b = store.add("head.fc2.bias", Tensor::zeros(vec![2]))?;
        store.add_buffer(RUNNING_MEAN, Tensor::zeros(vec![h]))?;
        store.add_buffer(RUNNING_VAR, Tensor::full(vec![h], 1.0))?;
        Ok(ClassifierHead {
            fc1_w,
            fc1_b,
            bn_w,
            bn_b,
            fc2_w,
            fc2_b,
            bn_eps: cfg.bn_eps,
        })
    }

    pub fn bind(embed_dim: usize, cfg: &Stage2Config, store: &ParamStore<f32>) -> Result<Self> {
        let h = cfg.hidden_dim;
        let get = |name: &str, shape: &[usize]| -> Result<ParamId> {
            let id = store.id(name)?;
            if store.value(id).shape() != shape {
                return Err(Error::shape(format!(
                    "`{name}` has shape {:?}, expected {shape:?}",
                    store.value(id).shape()
                )));
            }
            Ok(id)
        };
        for name in [RUNNING_MEAN, RUNNING_VAR] {
            if store.buffer(name)?.shape() != [h] {
                return Err(Error::shape(format!("buffer `{name}` must have {h} entries")));
            }
        }
        Ok(ClassifierHead {
            fc1_w: get("head.fc1.weight", &[embed_dim, h])?,
            fc1_b: get("head.fc1.bias", &[h])?,
            bn_w: get("head.bn.weight", &[h])?,
            bn_b: get("head.bn.bias", &[h])?,
            fc2_w: get("head.fc2.weight", &[h, 2])?,
            fc2_b: get("head.fc2.bias", &[2])?,
            bn_eps: cfg.bn_eps,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.fc1_w, self.fc1_b, self.bn_w, self.bn_b, self.fc2_w, self.fc2_b]
    }

    /// Class probabilities `[batch, 2]` for stacked representations. In
    /// training mode the batch statistics are returned for the running update.
    pub fn forward(
        &self,
        g: &mut Graph<'_, f32>,
        reps: Var,
        train: bool,
    ) -> Result<(Var, Option<crate::autodiff::BatchStats<f32>>)> {
        let store = g.store();
        let (w1, b1, gw, gb, w2, b2) = (
            g.param(self.fc1_w),
            g.param(self.fc1_b),
            g.param(self.bn_w),
            g.param(self.bn_b),
            g.param(self.fc2_w),
            g.param(self.fc2_b),
        );
        let h = g.linear(reps, w1, Some(b1))?;
        let mode = if train {
            NormMode::Train
        } else {
            NormMode::Eval {
                mean: store.buffer(RUNNING_MEAN)?.data(),
                var: store.buffer(RUNNING_VAR)?.data(),
            }
        };
        let (h, stats) = g.batch_norm(h, gw, gb, self.bn_eps as f32, mode)?;
        let h = g.relu(h)?;
        let logits = g.linear(h, w2, Some(b2))?;
        Ok((g.softmax(logits)?, stats))
    }

    /// Eval-mode probabilities for each representation.
    pub fn probabilities(&self, store: &ParamStore<f32>, reps: &[Vec<f32>]) -> Result<Vec<[f64; 2]>> {
        if reps.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new(store);
        let d = reps[0].len();
        let x = g.input(Tensor::new(vec![reps.len(), d], reps.concat())?)?;
        let (p, _) = self.forward(&mut g, x, false)?;
        Ok(g.value(p).chunks(2).map(|r| [r[0] as f64, r[1] as f64]).collect())
    }

    /// Exponential moving average of the batch statistics.
    pub fn update_running(store: &mut ParamStore<f32>, stats: &crate::autodiff::BatchStats<f32>, momentum: f64) -> Result<()> {
        let m = momentum as f32;
        for (name, batch) in [(RUNNING_MEAN, &stats.mean), (RUNNING_VAR, &stats.var)] {
            let buf = store.buffer_mut(name)?;
            for (r, b) in buf.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - m) * *r + m * *b;
            }
        }
        Ok(())
    }
}

/// Weighted cross-entropy over a batch: `Σ w_y·(−log p_y) / Σ w_y`.
fn batch_loss(g: &mut Graph<'_, f32>, probs: Var, labels: &[Label], weights: [f64; 2]) -> Result<Var> {
    let idx: Vec<usize> = labels.iter().map(|l| l.index()).collect();
    let w: Vec<f32> = idx.iter().map(|k| weights[*k] as f32).collect();
    let total: f32 = w.iter().sum();
    let p = g.gather(probs, &idx)?;
    let p = g.clamp(p, PROB_FLOOR as f32, 1.0)?;
    let l = g.log(p)?;
    let l = g.mul_const(l, &w)?;
    let s = g.sum(l)?;
    g.scale(s, -1.0 / total)
}

/// Encoder plus classifier head loaded from a checkpoint.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub config: RunConfig,
    pub store: ParamStore<f32>,
    pub backbone: Backbone,
    pub head: ClassifierHead,
}

impl Classifier {
    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let snap = ModelSnapshot::from_value(&ckpt.config)?;
        let store = ckpt.to_store()?;
        let backbone = Backbone::bind(&snap.run.backbone, &store)?;
        let head = ClassifierHead::bind(snap.run.backbone.embed_dim, &snap.run.stage2, &store)
            .map_err(|e| Error::Checkpoint(format!("{}: no classifier head ({e})", path.display())))?;
        Ok(Classifier {
            config: snap.run,
            store,
            backbone,
            head,
        })
    }

    pub fn probabilities(&self, specs: &[LogMelSpectrogram]) -> Result<Vec<[f64; 2]>> {
        let reps = try_map_range(specs.len(), |i| self.backbone.represent(&self.store, &specs[i]))?;
        self.head.probabilities(&self.store, &reps)
    }

    /// Spoof posteriors of every entry, from un-augmented features.
    pub fn score(&self, data: &Dataset, features: &FeaturePipeline) -> Result<Vec<ScoreRecord>> {
        score_dataset(&self.backbone, &self.head, &self.store, data, features)
    }
}

/// `p(bonafide), p(spoof)` for one spectrogram.
pub fn classify(
    x: &LogMelSpectrogram,
    backbone: &Backbone,
    head: &ClassifierHead,
    store: &ParamStore<f32>,
) -> Result<[f64; 2]> {
    let rep = backbone.represent(store, x)?;
    Ok(head.probabilities(store, &[rep])?[0])
}

pub fn score_dataset(
    bb: &Backbone,
    head: &ClassifierHead,
    store: &ParamStore<f32>,
    data: &Dataset,
    features: &FeaturePipeline,
) -> Result<Vec<ScoreRecord>> {
    let reps = try_map_range(data.len(), |i| bb.represent(store, &features.plain(&data.waves[i])?))?;
    let probs = head.probabilities(store, &reps)?;
    Ok(data
        .entries
        .iter()
        .zip(probs)
        .map(|(e, p)| ScoreRecord {
            utt_id: e.utt_id.clone(),
            score: p[1],
            label: e.label,
        })
        .collect())
}

/// SHA-256 over the names, shapes and values of every parameter whose
/// name starts with `prefix`.
pub fn params_hash(store: &ParamStore<f32>, prefix: &str) -> String {
    let mut h = Sha256::new();
    for p in store.params().iter().filter(|p| p.name.starts_with(prefix)) {
        h.update(p.name.as_bytes());
        for d in p.tensor.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in p.tensor.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Consecutive batches; a trailing single sample joins the previous batch
/// because training-mode batch norm needs two rows.
pub fn batch_ranges(n: usize, batch: usize) -> Vec<Range<usize>> {
    let mut out: Vec<Range<usize>> = (0..n).step_by(batch).map(|s| s..(s + batch).min(n)).collect();
    if out.len() >= 2 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().end = last.end;
    }
    out
}

#[derive(Clone, Debug)]
pub struct Stage2Outcome {
    pub best_epoch: usize,
    pub best_checkpoint: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub val_eers: Vec<f64>,
    pub log_path: PathBuf,
    pub backbone_hash_before: String,
    pub backbone_hash_after: String,
}

/// Loads the encoder from `backbone_ckpt` (or initializes it randomly when
/// `None`), trains the head and returns the epoch with the lowest
/// validation EER.
pub fn run_stage2(
    cfg: &RunConfig,
    backbone_ckpt: Option<&Path>,
    train: &Dataset,
    val: &Dataset,
    out_dir: &Path,
) -> Result<Stage2Outcome> {
    let mut cfg = cfg.clone();
    let (mut store, backbone) = match backbone_ckpt {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let snap = ModelSnapshot::from_value(&ckpt.config)?;
            if snap.run.backbone != cfg.backbone || snap.run.frontend != cfg.frontend {
                log::warn!("using the backbone and frontend settings stored in {}", path.display());
                cfg.backbone = snap.run.backbone;
                cfg.frontend = snap.run.frontend;
            }
            // drop an existing head so a fresh one can be registered
            let mut keep = Checkpoint::new(ckpt.config.clone());
            keep.tensors = ckpt.tensors.into_iter().filter(|t| !t.name.starts_with(HEAD_PREFIX)).collect();
            let store = keep.to_store()?;
            let bb = Backbone::bind(&cfg.backbone, &store)?;
            (store, bb)
        }
        None => {
            let mut store = ParamStore::new();
            let mut rng = RngStream::derive(cfg.stage2.seed, &[crate::stage1::STREAM_INIT]).rng();
            let bb = Backbone::init(&cfg.backbone, &mut store, &mut rng)?;
            (store, bb)
        }
    };
    cfg.validate()?;
    let s2 = cfg.stage2.clone();
    if train.len() < 2 || val.is_empty() {
        return Err(Error::InvalidArgument("stage2 needs at least two training and one validation entry".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut rng = RngStream::derive(s2.seed, &[STREAM_HEAD_INIT]).rng();
    let head = ClassifierHead::init(cfg.backbone.embed_dim, &s2, &mut store, &mut rng)?;
    let trainable: Vec<ParamId> = if s2.freeze_backbone {
        head.params()
    } else {
        backbone.encoder_params().into_iter().chain(head.params()).collect()
    };
    let mut opt = Adam::new(&store, trainable, s2.adam);
    let policy = cfg.augmentation.clone();
    let features = cfg.feature_pipeline_with(policy)?;
    let plain = cfg.feature_pipeline_with(crate::augment::AugmentationPolicy::none())?;
    let hash_before = params_hash(&store, BACKBONE_PREFIX);

    let log_path = out_dir.join("stage2_log.tsv");
    let mut log = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let io = |e| Error::io(&log_path, e);
    writeln!(log, "epoch\tlr\ttrain_loss\tval_eer").map_err(io)?;

    let mut checkpoints = Vec::new();
    let mut val_eers = Vec::new();
    for epoch in 0..s2.epochs {
        let lr = s2.lr_at(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        if s2.shuffle {
            order.shuffle(&mut RngStream::derive(s2.seed, &[STREAM_SHUFFLE, epoch as u64]).rng());
        }
        let mut loss_sum = 0.0;
        for range in batch_ranges(train.len(), s2.batch_size) {
            let idx = &order[range];
            let specs = try_map_range(idx.len(), |i| {
                let k = idx[i];
                let mut rng = RngStream::derive(s2.seed, &[STREAM_SAMPLE, epoch as u64, k as u64]).rng();
                if s2.augment {
                    let sel = Selection::Probability(s2.aug_probability);
                    Ok(features.policy().apply(&train.waves[k], sel, features.extractor(), &mut rng)?.features)
                } else {
                    plain.plain(&train.waves[k])
                }
            })?;
            let labels: Vec<Label> = idx.iter().map(|k| train.entries[*k].label).collect();
            let (mut grads, loss, stats) = head_step(&backbone, &head, &store, &specs, &labels, &s2)?;
            apply_update(&mut store, &mut opt, &mut grads, s2.grad_clip, lr)?;
            ClassifierHead::update_running(&mut store, &stats, s2.bn_momentum)?;
            loss_sum += loss * idx.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;
        let scores = score_dataset(&backbone, &head, &store, val, &plain)?;
        let eer = compute_eer(&scores)?;
        log::info!(
            "stage2 epoch {}/{}: lr {lr:.3e} train loss {train_loss:.5} val EER {eer:.4}",
            epoch + 1,
            s2.epochs
        );
        writeln!(log, "{}\t{lr}\t{train_loss}\t{eer}", epoch + 1).map_err(io)?;
        let path = epoch_checkpoint_path(out_dir, Stage::Stage2, epoch + 1);
        let snapshot = ModelSnapshot::new(Stage::Stage2, epoch + 1, &cfg);
        Checkpoint::from_store(&store, snapshot.to_value(), |_| true).save(&path)?;
        checkpoints.push(path);
        val_eers.push(eer);
    }
    let hash_after = params_hash(&store, BACKBONE_PREFIX);
    if s2.freeze_backbone && hash_after != hash_before {
        return Err(Error::InvalidArgument("frozen backbone parameters changed during training".into()));
    }
    let best = select_best(&val_eers).expect("at least one epoch");
    let best_checkpoint = best_checkpoint_path(out_dir, Stage::Stage2);
    std::fs::copy(&checkpoints[best], &best_checkpoint).map_err(|e| Error::io(&best_checkpoint, e))?;
    Ok(Stage2Outcome {
        best_epoch: best + 1,
        best_checkpoint,
        checkpoints,
        val_eers,
        log_path,
        backbone_hash_before: hash_before,
        backbone_hash_after: hash_after,
    })
}

/// Gradients of the batch loss for the trainable parameters, the loss value
/// and the batch-norm statistics. With an unfrozen encoder the gradient
/// reaching each representation is pushed back through a recomputed
/// per-sample encoder graph.
pub fn head_step(
    bb: &Backbone,
    head: &ClassifierHead,
    store: &ParamStore<f32>,
    specs: &[LogMelSpectrogram],
    labels: &[Label],
    cfg: &Stage2Config,
) -> Result<(Gradients<f32>, f64, crate::autodiff::BatchStats<f32>)> {
    let reps = try_map_range(specs.len(), |i| bb.represent(store, &specs[i]))?;
    let mut g = Graph::new(store);
    let d = reps[0].len();
    let x = g.input(Tensor::new(vec![reps.len(), d], reps.concat())?)?;
    let (probs, stats) = head.forward(&mut g, x, true)?;
    let loss = batch_loss(&mut g, probs, labels, cfg.class_weights).map_err(|e| match e {
        Error::NonFinite(m) => Error::Divergence(m),
        other => other,
    })?;
    let mut grads = g.backward(loss)?;
    let loss_value = g.scalar(loss) as f64;
    let stats = stats.expect("training mode reports statistics");
    if !cfg.freeze_backbone {
        let dx = grads.leaf(x).expect("input gradient").to_vec();
        let chunks = specs.len().div_ceil(GRAD_CHUNK);
        let partials = try_map_range(chunks, |c| {
            let mut acc = Gradients::empty(store.len());
            for i in c * GRAD_CHUNK..((c + 1) * GRAD_CHUNK).min(specs.len()) {
                let mut eg = Graph::new(store);
                let input = bb.input(&mut eg, &specs[i])?;
                let t = bb.encode_self(&mut eg, input)?;
                acc.accumulate(&eg.backward_seeded(&[(t.pooled, dx[i * d..(i + 1) * d].to_vec())])?);
            }
            Ok(acc)
        })?;
        for p in &partials {
            grads.accumulate(p);
        }
    }
    let keep: Vec<ParamId> = if cfg.freeze_backbone {
        head.params()
    } else {
        bb.encoder_params().into_iter().chain(head.params()).collect()
    };
    grads.retain_params(|id| keep.contains(&id));
    Ok((grads, loss_value, stats))
}

#[cfg(test)]
mod tests;
