//! Stage I: Siamese contrastive training of the encoder.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Gradients, Graph, ParamStore, Real, Var};
use crate::backbone::Backbone;
use crate::checkpoint::Checkpoint;
use crate::config::{ModelSnapshot, RunConfig, Stage};
use crate::error::{Error, Result};
use crate::frontend::LogMelSpectrogram;
use crate::manifest::{Dataset, Label, ManifestEntry, Subtype};
use crate::parallel::try_map_range;
use crate::pipeline::FeaturePipeline;
use crate::rng::RngStream;

/// Per-sample gradients are summed in groups of this many, in order, so the
/// reduction does not depend on the number of worker threads.
pub const GRAD_CHUNK: usize = 4;

pub(crate) const STREAM_INIT: u64 = 1;
pub(crate) const STREAM_PAIR: u64 = 2;
pub(crate) const STREAM_VALIDATION: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    /// Weight of the cross-attention term.
    pub alpha: f64,
    /// Build the cross-attention branch at all; with `false` only the two
    /// self-attention branches run.
    pub cross_attention: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay_gamma: f64,
    pub lr_decay_every: usize,
    pub cosine_eps: f64,
    /// Similarities are clamped to `[clamp_eps, 1 - clamp_eps]` before the log.
    pub clamp_eps: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    pub adam: AdamConfig,
    /// Apply the augmentation policy to training pairs.
    pub augment: bool,
    pub seed: u64,
    pub val_seed: u64,
    /// Start from these weights instead of a random initialization.
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            alpha: 0.2,
            cross_attention: true,
            batch_size: 64,
            epochs: 50,
            lr: 1e-4,
            lr_decay_gamma: 0.95,
            lr_decay_every: 5,
            cosine_eps: 1e-8,
            clamp_eps: 1e-7,
            grad_clip: 5.0,
            adam: AdamConfig::default(),
            augment: true,
            seed: 0,
            val_seed: 20_240_601,
            init_checkpoint: None,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("stage1: {m}")));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must be in [0, 1]");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.lr_decay_every == 0 {
            return bad("batch_size, epochs and lr_decay_every must be positive");
        }
        if !(self.lr > 0.0 && self.lr_decay_gamma > 0.0 && self.cosine_eps > 0.0) {
            return bad("lr, lr_decay_gamma and cosine_eps must be positive");
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) || self.grad_clip < 0.0 {
            return bad("clamp_eps must be in (0, 0.5) and grad_clip nonnegative");
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        step_decay(self.lr, self.lr_decay_gamma, self.lr_decay_every, epoch)
    }
}

/// `base · gamma^floor(epoch / every)` for a zero-based epoch.
pub fn step_decay(base: f64, gamma: f64, every: usize, epoch: usize) -> f64 {
    base * gamma.powi((epoch / every.max(1)) as i32)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sa: f64,
    pub l_ca: f64,
    pub l_con: f64,
    pub alpha: f64,
}

impl LossBreakdown {
    fn add(&mut self, o: &LossBreakdown) {
        self.l_sa += o.l_sa;
        self.l_ca += o.l_ca;
        self.l_con += o.l_con;
    }

    fn scaled(mut self, c: f64) -> Self {
        self.l_sa *= c;
        self.l_ca *= c;
        self.l_con *= c;
        self
    }
}

/// `aᵀb / max(‖a‖·‖b‖, eps)`.
pub fn cosine_sim(a: &[f64], b: &[f64], eps: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("cosine of lengths {} and {}", a.len(), b.len())));
    }
    if eps <= 0.0 {
        return Err(Error::InvalidArgument("cosine eps must be positive".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(dot / (na * nb).max(eps))
}

/// `-log c` for a same-class pair, `-log(1 - c)` otherwise, with `c`
/// clamped to `[clamp_eps, 1 - clamp_eps]`.
pub fn pair_term(cos: f64, same_class: bool, clamp_eps: f64) -> f64 {
    let c = cos.clamp(clamp_eps, 1.0 - clamp_eps);
    if same_class {
        -c.ln()
    } else {
        -(1.0 - c).ln()
    }
}

/// Loss of one pair from its three projected embeddings.
pub fn contrastive_loss(
    r1_sa: &[f64],
    r2_sa: &[f64],
    r12_ca: &[f64],
    same_class: bool,
    alpha: f64,
    cosine_eps: f64,
    clamp_eps: f64,
) -> Result<LossBreakdown> {
    let l_sa = pair_term(cosine_sim(r1_sa, r2_sa, cosine_eps)?, same_class, clamp_eps);
    let l_ca = pair_term(cosine_sim(r1_sa, r12_ca, cosine_eps)?, same_class, clamp_eps);
    Ok(LossBreakdown {
        l_sa,
        l_ca,
        l_con: l_sa + alpha * l_ca,
        alpha,
    })
}

fn pair_term_graph<T: Real>(g: &mut Graph<'_, T>, a: Var, b: Var, same: bool, cfg: &Stage1Config) -> Result<Var> {
    let c = g.cosine(a, b, T::from_f64_lossy(cfg.cosine_eps))?;
    let c = g.clamp(c, T::from_f64_lossy(cfg.clamp_eps), T::from_f64_lossy(1.0 - cfg.clamp_eps))?;
    let inner = if same { c } else { g.affine(c, -T::one(), T::one())? };
    let l = g.log(inner)?;
    g.scale(l, -T::one())
}

/// Graph nodes of one pair's loss.
#[derive(Clone, Copy, Debug)]
pub struct PairLoss {
    pub l_con: Var,
    pub l_sa: Var,
    pub l_ca: Option<Var>,
}

impl PairLoss {
    pub fn breakdown<T: Real>(&self, g: &Graph<'_, T>, alpha: f64) -> LossBreakdown {
        LossBreakdown {
            l_sa: g.scalar(self.l_sa).to_f64_lossy(),
            l_ca: self.l_ca.map_or(0.0, |v| g.scalar(v).to_f64_lossy()),
            l_con: g.scalar(self.l_con).to_f64_lossy(),
            alpha,
        }
    }
}

/// Full three-branch forward pass of one pair: two self-attention
/// encodings, one cross-attention encoding, three projections and the loss.
pub fn pair_loss<T: Real>(
    bb: &Backbone,
    g: &mut Graph<'_, T>,
    x1: &LogMelSpectrogram,
    x2: &LogMelSpectrogram,
    same_class: bool,
    cfg: &Stage1Config,
) -> Result<PairLoss> {
    let (i1, i2) = (bb.input(g, x1)?, bb.input(g, x2)?);
    let t1 = bb.encode_self(g, i1)?;
    let t2 = bb.encode_self(g, i2)?;
    let p1 = bb.project(g, t1.pooled)?;
    let p2 = bb.project(g, t2.pooled)?;
    let l_sa = pair_term_graph(g, p1, p2, same_class, cfg)?;
    if !cfg.cross_attention {
        return Ok(PairLoss {
            l_con: l_sa,
            l_sa,
            l_ca: None,
        });
    }
    let r12 = bb.encode_cross(g, &t1, &t2)?;
    let p12 = bb.project(g, r12)?;
    let l_ca = pair_term_graph(g, p1, p12, same_class, cfg)?;
    let weighted = g.scale(l_ca, T::from_f64_lossy(cfg.alpha))?;
    Ok(PairLoss {
        l_con: g.add(l_sa, weighted)?,
        l_sa,
        l_ca: Some(l_ca),
    })
}

/// Partner pools by class and attack subtype.
#[derive(Clone, Debug, Default)]
pub struct PairSampler {
    bonafide: Vec<usize>,
    tts: Vec<usize>,
    vc: Vec<usize>,
}

impl PairSampler {
    pub fn new(entries: &[ManifestEntry]) -> Self {
        let mut s = PairSampler::default();
        for (i, e) in entries.iter().enumerate() {
            match (e.label, e.subtype) {
                (Label::Bonafide, _) => s.bonafide.push(i),
                (Label::Spoof, Some(Subtype::Tts)) => s.tts.push(i),
                (Label::Spoof, Some(Subtype::Vc)) => s.vc.push(i),
                (Label::Spoof, None) => {}
            }
        }
        s
    }

    fn pick(pool: &[usize], what: &str, rng: &mut impl Rng) -> Result<usize> {
        if pool.is_empty() {
            return Err(Error::Sampling(format!("no {what} entries to draw a partner from")));
        }
        Ok(pool[rng.random_range(0..pool.len())])
    }

    /// Partner index and whether it shares the anchor's class. The pairing
    /// class is a fair coin; spoof partners pick TTS or VC by a fair coin,
    /// then uniformly within that subtype.
    pub fn draw_partner(&self, anchor: Label, rng: &mut impl Rng) -> Result<(usize, bool)> {
        let same = rng.random_bool(0.5);
        let class = if same { anchor } else { anchor.other() };
        let idx = match class {
            Label::Bonafide => Self::pick(&self.bonafide, "bonafide", rng)?,
            Label::Spoof => {
                if rng.random_bool(0.5) {
                    Self::pick(&self.tts, "TTS", rng)?
                } else {
                    Self::pick(&self.vc, "VC", rng)?
                }
            }
        };
        Ok((idx, same))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub x1: LogMelSpectrogram,
    pub x2: LogMelSpectrogram,
    pub same_class: bool,
    pub anchor: usize,
    pub partner: usize,
}

/// Builds the pair anchored at `anchor`; all randomness comes from `stream`.
pub fn sample_pair(
    data: &Dataset,
    sampler: &PairSampler,
    anchor: usize,
    stream: RngStream,
    features: &FeaturePipeline,
    augment: bool,
) -> Result<PairSample> {
    let mut rng = stream.rng();
    let (partner, same_class) = sampler.draw_partner(data.entries[anchor].label, &mut rng)?;
    let (x1, x2) = if augment {
        let x1 = features.x1(&data.waves[anchor], &mut rng)?;
        (x1, features.x2(&data.waves[partner], &mut rng)?)
    } else {
        (features.plain(&data.waves[anchor])?, features.plain(&data.waves[partner])?)
    };
    Ok(PairSample {
        x1,
        x2,
        same_class,
        anchor,
        partner,
    })
}

fn diverged(e: Error) -> Error {
    match e {
        Error::NonFinite(m) => Error::Divergence(m),
        other => other,
    }
}

/// Gradient of the mean pair loss over `count` pairs produced by `make`,
/// plus the mean loss breakdown.
pub fn batch_gradients<T: Real>(
    bb: &Backbone,
    store: &ParamStore<T>,
    count: usize,
    make: impl Fn(usize) -> Result<PairSample> + Sync + Send,
    cfg: &Stage1Config,
) -> Result<(Gradients<T>, LossBreakdown)> {
    if count == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let seed = T::from_f64_lossy(1.0 / count as f64);
    let chunks = count.div_ceil(GRAD_CHUNK);
    let partials = try_map_range(chunks, |c| {
        let mut grads = Gradients::empty(store.len());
        let mut loss = LossBreakdown::default();
        for i in c * GRAD_CHUNK..((c + 1) * GRAD_CHUNK).min(count) {
            let pair = make(i)?;
            let mut g = Graph::new(store);
            let l = pair_loss(bb, &mut g, &pair.x1, &pair.x2, pair.same_class, cfg).map_err(diverged)?;
            grads.accumulate(&g.backward_seeded(&[(l.l_con, vec![seed])])?);
            loss.add(&l.breakdown(&g, cfg.alpha));
        }
        Ok((grads, loss))
    })?;
    let mut grads = Gradients::empty(store.len());
    let mut loss = LossBreakdown {
        alpha: cfg.alpha,
        ..LossBreakdown::default()
    };
    for (g, l) in &partials {
        grads.accumulate(g);
        loss.add(l);
    }
    if !grads.is_finite() {
        return Err(Error::Divergence("non-finite gradient".into()));
    }
    Ok((grads, loss.scaled(1.0 / count as f64)))
}

/// One optimizer update on the mean loss of the given pairs.
pub fn train_step<T: Real>(
    bb: &Backbone,
    store: &mut ParamStore<T>,
    opt: &mut Adam<T>,
    pairs: &[PairSample],
    cfg: &Stage1Config,
    lr: f64,
) -> Result<LossBreakdown> {
    let (mut grads, loss) = batch_gradients(bb, store, pairs.len(), |i| Ok(pairs[i].clone()), cfg)?;
    apply_update(store, opt, &mut grads, cfg.grad_clip, lr)?;
    Ok(loss)
}

pub(crate) fn apply_update<T: Real>(
    store: &mut ParamStore<T>,
    opt: &mut Adam<T>,
    grads: &mut Gradients<T>,
    clip: f64,
    lr: f64,
) -> Result<()> {
    if clip > 0.0 {
        let norm = grads.clip_global_norm(T::from_f64_lossy(clip)).to_f64_lossy();
        if norm > clip {
            log::info!("gradient norm {norm:.4} clipped to {clip}");
        }
    }
    opt.step(store, grads, lr)
}

/// Mean validation loss over pairs anchored at every entry, drawn from a
/// fixed seed without augmentation.
pub fn validation_loss(
    bb: &Backbone,
    store: &ParamStore<f32>,
    data: &Dataset,
    features: &FeaturePipeline,
    cfg: &Stage1Config,
) -> Result<f64> {
    let sampler = PairSampler::new(&data.entries);
    let losses = try_map_range(data.len(), |i| {
        let stream = RngStream::derive(cfg.val_seed, &[STREAM_VALIDATION, i as u64]);
        let pair = sample_pair(data, &sampler, i, stream, features, false)?;
        let mut g = Graph::new(store);
        let l = pair_loss(bb, &mut g, &pair.x1, &pair.x2, pair.same_class, cfg).map_err(diverged)?;
        Ok(g.scalar(l.l_con) as f64)
    })?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Index of the first minimum, ignoring NaN.
pub fn select_best(values: &[f64]) -> Option<usize> {
    values
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.is_nan())
        .fold(None, |best: Option<(usize, f64)>, (i, v)| match best {
            Some((_, b)) if b <= *v => best,
            _ => Some((i, *v)),
        })
        .map(|(i, _)| i)
}

#[derive(Clone, Debug)]
pub struct Stage1Outcome {
    /// One-based epoch of the selected checkpoint.
    pub best_epoch: usize,
    pub best_checkpoint: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub val_losses: Vec<f64>,
    pub log_path: PathBuf,
}

pub fn epoch_checkpoint_path(dir: &Path, stage: Stage, epoch: usize) -> PathBuf {
    dir.join(format!("{}_epoch{epoch:03}.ckpt", stage.as_str()))
}

pub fn best_checkpoint_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(format!("{}_best.ckpt", stage.as_str()))
}

/// Random initialization or the configured starting checkpoint.
pub fn initial_model(cfg: &RunConfig) -> Result<(Backbone, ParamStore<f32>)> {
    match &cfg.stage1.init_checkpoint {
        Some(path) => {
            let store = Checkpoint::load(path)?.to_store()?;
            let bb = Backbone::bind(&cfg.backbone, &store)?;
            Ok((bb, store))
        }
        None => {
            let mut store = ParamStore::new();
            let mut rng = RngStream::derive(cfg.stage1.seed, &[STREAM_INIT]).rng();
            let bb = Backbone::init(&cfg.backbone, &mut store, &mut rng)?;
            Ok((bb, store))
        }
    }
}

/// Trains for `cfg.stage1.epochs` epochs, saving a checkpoint and a log row
/// per epoch, and returns the epoch with the lowest validation loss.
pub fn run_stage1(cfg: &RunConfig, train: &Dataset, val: &Dataset, out_dir: &Path) -> Result<Stage1Outcome> {
    cfg.validate()?;
    let s1 = &cfg.stage1;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument("stage1 needs nonempty train and validation sets".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let features = cfg.feature_pipeline()?;
    let (bb, mut store) = initial_model(cfg)?;
    let mut opt = Adam::new(&store, bb.all_params(), s1.adam);
    let sampler = PairSampler::new(&train.entries);

    let log_path = out_dir.join("stage1_log.tsv");
    let mut log = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let io = |e| Error::io(&log_path, e);
    writeln!(log, "epoch\tlr\ttrain_l_sa\ttrain_l_ca\ttrain_l_con\tval_l_con").map_err(io)?;

    let mut checkpoints = Vec::new();
    let mut val_losses = Vec::new();
    for epoch in 0..s1.epochs {
        let lr = s1.lr_at(epoch);
        let mut total = LossBreakdown::default();
        for start in (0..train.len()).step_by(s1.batch_size) {
            let end = (start + s1.batch_size).min(train.len());
            let make = |i: usize| {
                let anchor = start + i;
                let stream = RngStream::derive(s1.seed, &[STREAM_PAIR, epoch as u64, anchor as u64]);
                sample_pair(train, &sampler, anchor, stream, &features, s1.augment)
            };
            let (mut grads, loss) = batch_gradients(&bb, &store, end - start, make, s1)?;
            apply_update(&mut store, &mut opt, &mut grads, s1.grad_clip, lr)?;
            total.add(&loss.scaled((end - start) as f64));
        }
        let train_loss = total.scaled(1.0 / train.len() as f64);
        let val_loss = validation_loss(&bb, &store, val, &features, s1)?;
        log::info!(
            "stage1 epoch {}/{}: lr {lr:.3e} train l_con {:.5} (l_sa {:.5}, l_ca {:.5}) val l_con {val_loss:.5}",
            epoch + 1,
            s1.epochs,
            train_loss.l_con,
            train_loss.l_sa,
            train_loss.l_ca
        );
        writeln!(
            log,
            "{}\t{lr}\t{}\t{}\t{}\t{val_loss}",
            epoch + 1,
            train_loss.l_sa,
            train_loss.l_ca,
            train_loss.l_con
        )
        .map_err(io)?;
        let path = epoch_checkpoint_path(out_dir, Stage::Stage1, epoch + 1);
        let snapshot = ModelSnapshot::new(Stage::Stage1, epoch + 1, cfg);
        Checkpoint::from_store(&store, snapshot.to_value(), |_| true).save(&path)?;
        checkpoints.push(path);
        val_losses.push(val_loss);
    }
    let best = select_best(&val_losses).ok_or_else(|| Error::Divergence("every validation loss is NaN".into()))?;
    let best_checkpoint = best_checkpoint_path(out_dir, Stage::Stage1);
    std::fs::copy(&checkpoints[best], &best_checkpoint).map_err(|e| Error::io(&best_checkpoint, e))?;
    Ok(Stage1Outcome {
        best_epoch: best + 1,
        best_checkpoint,
        checkpoints,
        val_losses,
        log_path,
    })
}
