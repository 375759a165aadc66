//! Patch-sequence transformer encoder with self- and cross-attention modes
//! sharing one set of weights, plus the projection head used in Stage I.
//!
//! Parameter names are part of the checkpoint format:
//!
//! | name | shape |
//! |------|-------|
//! | `backbone.patch_embed.weight` | `[n_mels·patch_width, embed_dim]` |
//! | `backbone.patch_embed.bias` | `[embed_dim]` |
//! | `backbone.pos_embed` | `[num_patches, embed_dim]` |
//! | `backbone.blocks.{i}.norm1.{weight,bias}` | `[embed_dim]` |
//! | `backbone.blocks.{i}.attn.{w_q,w_k,w_v,w_o}` | `[embed_dim, embed_dim]` |
//! | `backbone.blocks.{i}.attn.{b_q,b_k,b_v,b_o}` | `[embed_dim]` |
//! | `backbone.blocks.{i}.norm2.{weight,bias}` | `[embed_dim]` |
//! | `backbone.blocks.{i}.mlp.fc1.{weight,bias}` | `[embed_dim, mlp_hidden]`, `[mlp_hidden]` |
//! | `backbone.blocks.{i}.mlp.fc2.{weight,bias}` | `[mlp_hidden, embed_dim]`, `[embed_dim]` |
//! | `projection.norm1.{weight,bias}` | `[embed_dim]` |
//! | `projection.linear.{weight,bias}` | `[embed_dim, projection_dim]`, `[projection_dim]` |
//! | `projection.norm2.{weight,bias}` | `[projection_dim]` |
//!
//! Linear weights are stored `[in, out]`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::frontend::LogMelSpectrogram;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub n_mels: usize,
    pub n_frames: usize,
    /// Patch width in time bins; patches span all mel bins.
    pub patch_width: usize,
    pub patch_stride: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    pub projection_dim: usize,
    pub ln_eps: f64,
    /// Inputs are normalized as `(x - input_mean) / (2 · input_std)`.
    pub input_mean: f64,
    pub input_std: f64,
    /// Standard deviation of the truncated-normal weight initialization.
    pub init_std: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            n_mels: 128,
            n_frames: 512,
            patch_width: 2,
            patch_stride: 1,
            embed_dim: 192,
            num_blocks: 12,
            num_heads: 3,
            mlp_hidden: 768,
            projection_dim: 512,
            ln_eps: 1e-6,
            input_mean: -4.267_739_3,
            input_std: 4.568_997_4,
            init_std: 0.02,
        }
    }
}

impl BackboneConfig {
    pub fn num_patches(&self) -> usize {
        if self.n_frames < self.patch_width || self.patch_stride == 0 {
            0
        } else {
            (self.n_frames - self.patch_width) / self.patch_stride + 1
        }
    }

    pub fn patch_dim(&self) -> usize {
        self.n_mels * self.patch_width
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("backbone: {m}")));
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.n_mels == 0 || self.patch_width == 0 || self.patch_stride == 0 || self.num_patches() == 0 {
            return bad("patch geometry yields no patches".into());
        }
        if self.mlp_hidden == 0 || self.projection_dim == 0 {
            return bad("mlp_hidden and projection_dim must be positive".into());
        }
        if !(self.ln_eps > 0.0 && self.input_std > 0.0 && self.init_std >= 0.0) {
            return bad("ln_eps and input_std must be positive, init_std nonnegative".into());
        }
        Ok(())
    }

    /// Exact number of learnable scalars in the encoder and projection head.
    pub fn parameter_count(&self) -> usize {
        let (e, h, d) = (self.embed_dim, self.mlp_hidden, self.projection_dim);
        let embed = self.patch_dim() * e + e + self.num_patches() * e;
        let block = 2 * e + 4 * (e * e + e) + 2 * e + (e * h + h) + (h * e + e);
        let projection = 2 * e + (e * d + d) + 2 * d;
        embed + self.num_blocks * block + projection
    }
}

#[derive(Clone, Debug)]
struct Norm {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct Dense {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct Block {
    norm1: Norm,
    q: Dense,
    k: Dense,
    v: Dense,
    o: Dense,
    norm2: Norm,
    fc1: Dense,
    fc2: Dense,
}

/// Per-block attention inputs recorded by a self-attention pass, reused by
/// the cross-attention pass.
#[derive(Clone, Debug)]
pub struct SelfTrace {
    pub embedded: Var,
    pub queries: Vec<Var>,
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
    /// Mean-pooled representation, `[embed_dim]`.
    pub pooled: Var,
}

/// Handles to the encoder parameters inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    patch: Dense,
    pos: ParamId,
    blocks: Vec<Block>,
    proj_norm1: Norm,
    proj: Dense,
    proj_norm2: Norm,
}

/// Prefix shared by all encoder parameter names (the projection head is separate).
pub const BACKBONE_PREFIX: &str = "backbone.";
pub const PROJECTION_PREFIX: &str = "projection.";

fn truncated_normal<R: Rng>(n: usize, std: f64, rng: &mut R) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; n];
    }
    let normal = Normal::new(0.0, std).expect("valid std");
    (0..n)
        .map(|_| loop {
            let v = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect()
}

struct Registrar<'a, T, R> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
    std: f64,
}

impl<T: Real, R: Rng> Registrar<'_, T, R> {
    fn add(&mut self, name: String, shape: Vec<usize>, values: Vec<f64>) -> Result<ParamId> {
        let data = values.into_iter().map(T::from_f64_lossy).collect();
        self.store.add(name, Tensor::new(shape, data)?)
    }

    fn random(&mut self, name: String, shape: Vec<usize>) -> Result<ParamId> {
        let n = shape.iter().product();
        let values = truncated_normal(n, self.std, self.rng);
        self.add(name, shape, values)
    }

    fn dense(&mut self, prefix: &str, w: &str, b: &str, inp: usize, out: usize) -> Result<Dense> {
        Ok(Dense {
            weight: self.random(format!("{prefix}.{w}"), vec![inp, out])?,
            bias: self.add(format!("{prefix}.{b}"), vec![out], vec![0.0; out])?,
        })
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Result<Norm> {
        Ok(Norm {
            weight: self.add(format!("{prefix}.weight"), vec![d], vec![1.0; d])?,
            bias: self.add(format!("{prefix}.bias"), vec![d], vec![0.0; d])?,
        })
    }
}

fn lookup<T: Real>(store: &ParamStore<T>, name: &str, shape: &[usize]) -> Result<ParamId> {
    let id = store.id(name)?;
    let found = store.value(id).shape();
    if found != shape {
        return Err(Error::shape(format!("parameter `{name}` has shape {found:?}, expected {shape:?}")));
    }
    Ok(id)
}

impl Backbone {
    /// Registers freshly initialized encoder and projection parameters.
    pub fn init<T: Real>(cfg: &BackboneConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (e, h, d) = (cfg.embed_dim, cfg.mlp_hidden, cfg.projection_dim);
        let mut r = Registrar {
            store,
            rng,
            std: cfg.init_std,
        };
        let patch = r.dense("backbone.patch_embed", "weight", "bias", cfg.patch_dim(), e)?;
        let pos = r.random("backbone.pos_embed".into(), vec![cfg.num_patches(), e])?;
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for i in 0..cfg.num_blocks {
            let p = format!("backbone.blocks.{i}");
            blocks.push(Block {
                norm1: r.norm(&format!("{p}.norm1"), e)?,
                q: r.dense(&format!("{p}.attn"), "w_q", "b_q", e, e)?,
                k: r.dense(&format!("{p}.attn"), "w_k", "b_k", e, e)?,
                v: r.dense(&format!("{p}.attn"), "w_v", "b_v", e, e)?,
                o: r.dense(&format!("{p}.attn"), "w_o", "b_o", e, e)?,
                norm2: r.norm(&format!("{p}.norm2"), e)?,
                fc1: r.dense(&format!("{p}.mlp.fc1"), "weight", "bias", e, h)?,
                fc2: r.dense(&format!("{p}.mlp.fc2"), "weight", "bias", h, e)?,
            });
        }
        let proj_norm1 = r.norm("projection.norm1", e)?;
        let proj = r.dense("projection.linear", "weight", "bias", e, d)?;
        let proj_norm2 = r.norm("projection.norm2", d)?;
        Ok(Backbone {
            cfg: cfg.clone(),
            patch,
            pos,
            blocks,
            proj_norm1,
            proj,
            proj_norm2,
        })
    }

    /// Finds existing parameters by name and checks their shapes.
    pub fn bind<T: Real>(cfg: &BackboneConfig, store: &ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let (e, h, d) = (cfg.embed_dim, cfg.mlp_hidden, cfg.projection_dim);
        let dense = |prefix: &str, w: &str, b: &str, inp: usize, out: usize| -> Result<Dense> {
            Ok(Dense {
                weight: lookup(store, &format!("{prefix}.{w}"), &[inp, out])?,
                bias: lookup(store, &format!("{prefix}.{b}"), &[out])?,
            })
        };
        let norm = |prefix: &str, d: usize| -> Result<Norm> {
            Ok(Norm {
                weight: lookup(store, &format!("{prefix}.weight"), &[d])?,
                bias: lookup(store, &format!("{prefix}.bias"), &[d])?,
            })
        };
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for i in 0..cfg.num_blocks {
            let p = format!("backbone.blocks.{i}");
            blocks.push(Block {
                norm1: norm(&format!("{p}.norm1"), e)?,
                q: dense(&format!("{p}.attn"), "w_q", "b_q", e, e)?,
                k: dense(&format!("{p}.attn"), "w_k", "b_k", e, e)?,
                v: dense(&format!("{p}.attn"), "w_v", "b_v", e, e)?,
                o: dense(&format!("{p}.attn"), "w_o", "b_o", e, e)?,
                norm2: norm(&format!("{p}.norm2"), e)?,
                fc1: dense(&format!("{p}.mlp.fc1"), "weight", "bias", e, h)?,
                fc2: dense(&format!("{p}.mlp.fc2"), "weight", "bias", h, e)?,
            });
        }
        Ok(Backbone {
            cfg: cfg.clone(),
            patch: dense("backbone.patch_embed", "weight", "bias", cfg.patch_dim(), e)?,
            pos: lookup(store, "backbone.pos_embed", &[cfg.num_patches(), e])?,
            blocks,
            proj_norm1: norm("projection.norm1", e)?,
            proj: dense("projection.linear", "weight", "bias", e, d)?,
            proj_norm2: norm("projection.norm2", d)?,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Ids of the encoder parameters, excluding the projection head.
    pub fn encoder_params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.patch.weight, self.patch.bias, self.pos];
        for b in &self.blocks {
            ids.extend([
                b.norm1.weight,
                b.norm1.bias,
                b.q.weight,
                b.q.bias,
                b.k.weight,
                b.k.bias,
                b.v.weight,
                b.v.bias,
                b.o.weight,
                b.o.bias,
                b.norm2.weight,
                b.norm2.bias,
                b.fc1.weight,
                b.fc1.bias,
                b.fc2.weight,
                b.fc2.bias,
            ]);
        }
        ids
    }

    /// Ids of every parameter this model owns.
    pub fn all_params(&self) -> Vec<ParamId> {
        let mut ids = self.encoder_params();
        ids.extend([
            self.proj_norm1.weight,
            self.proj_norm1.bias,
            self.proj.weight,
            self.proj.bias,
            self.proj_norm2.weight,
            self.proj_norm2.bias,
        ]);
        ids
    }

    /// Splits the normalized spectrogram into patches, one row per patch.
    /// Row `i` holds columns `[i·stride, i·stride + width)` of every mel row,
    /// flattened mel-major.
    pub fn patchify(&self, spec: &LogMelSpectrogram) -> Result<Tensor<f32>> {
        let cfg = &self.cfg;
        if spec.n_mels != cfg.n_mels || spec.n_frames != cfg.n_frames {
            return Err(Error::shape(format!(
                "spectrogram {}x{} does not match backbone input {}x{}",
                spec.n_mels, spec.n_frames, cfg.n_mels, cfg.n_frames
            )));
        }
        let mean = cfg.input_mean as f32;
        let inv = (1.0 / (2.0 * cfg.input_std)) as f32;
        Ok(patchify_raw(spec, cfg.patch_width, cfg.patch_stride)?.map(|v| (v - mean) * inv))
    }

    /// Patch projection plus positional embedding, `[num_patches, embed_dim]`.
    pub fn embed<T: Real>(&self, g: &mut Graph<'_, T>, patches: Var) -> Result<Var> {
        let (w, b, pos) = (g.param(self.patch.weight), g.param(self.patch.bias), g.param(self.pos));
        let x = g.linear(patches, w, Some(b))?;
        g.add(x, pos)
    }

    fn layer_norm<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, n: &Norm) -> Result<Var> {
        let (w, b) = (g.param(n.weight), g.param(n.bias));
        g.layer_norm(x, w, b, T::from_f64_lossy(self.cfg.ln_eps))
    }

    fn dense<T: Real>(g: &mut Graph<'_, T>, x: Var, d: &Dense) -> Result<Var> {
        let (w, b) = (g.param(d.weight), g.param(d.bias));
        g.linear(x, w, Some(b))
    }

    /// Attention output projection, residual add, then the MLP sub-block.
    fn finish_block<T: Real>(&self, g: &mut Graph<'_, T>, skip: Var, attn: Var, b: &Block) -> Result<Var> {
        let o = Self::dense(g, attn, &b.o)?;
        let h = g.add(skip, o)?;
        let n = self.layer_norm(g, h, &b.norm2)?;
        let m = Self::dense(g, n, &b.fc1)?;
        let m = g.gelu(m)?;
        let m = Self::dense(g, m, &b.fc2)?;
        g.add(h, m)
    }

    /// Self-attention encoding of a `[num_patches, patch_dim]` input.
    pub fn encode_self<T: Real>(&self, g: &mut Graph<'_, T>, patches: Var) -> Result<SelfTrace> {
        let embedded = self.embed(g, patches)?;
        let heads = self.cfg.num_heads;
        let (mut queries, mut keys, mut values) = (Vec::new(), Vec::new(), Vec::new());
        let mut h = embedded;
        for b in &self.blocks {
            let n = self.layer_norm(g, h, &b.norm1)?;
            let q = Self::dense(g, n, &b.q)?;
            let k = Self::dense(g, n, &b.k)?;
            let v = Self::dense(g, n, &b.v)?;
            let a = g.attention(q, k, v, heads)?;
            h = self.finish_block(g, h, a, b)?;
            queries.push(q);
            keys.push(k);
            values.push(v);
        }
        let pooled = g.mean_rows(h)?;
        Ok(SelfTrace {
            embedded,
            queries,
            keys,
            values,
            pooled,
        })
    }

    /// Cross-attention encoding: every block attends with the queries of
    /// `x1`'s self stream over the keys and values of `x2`'s self stream.
    /// The first skip input is `x2`'s patch embedding sequence, later skips
    /// carry this stream's own block outputs. Returns the pooled `[embed_dim]`.
    pub fn encode_cross<T: Real>(&self, g: &mut Graph<'_, T>, x1: &SelfTrace, x2: &SelfTrace) -> Result<Var> {
        let mut h = x2.embedded;
        for (l, b) in self.blocks.iter().enumerate() {
            let a = g.attention(x1.queries[l], x2.keys[l], x2.values[l], self.cfg.num_heads)?;
            h = self.finish_block(g, h, a, b)?;
        }
        g.mean_rows(h)
    }

    /// `ReLU(LN(Linear(LN(r))))`, `[embed_dim] -> [projection_dim]`.
    pub fn project<T: Real>(&self, g: &mut Graph<'_, T>, r: Var) -> Result<Var> {
        let x = self.layer_norm(g, r, &self.proj_norm1)?;
        let x = Self::dense(g, x, &self.proj)?;
        let x = self.layer_norm(g, x, &self.proj_norm2)?;
        g.relu(x)
    }

    /// Patchifies `spec` and records it as a graph input.
    pub fn input<T: Real>(&self, g: &mut Graph<'_, T>, spec: &LogMelSpectrogram) -> Result<Var> {
        g.input(self.patchify(spec)?.cast())
    }

    /// Pre-projection self-attention representation of one spectrogram.
    pub fn represent(&self, store: &ParamStore<f32>, spec: &LogMelSpectrogram) -> Result<Vec<f32>> {
        let mut g = Graph::new(store);
        let x = self.input(&mut g, spec)?;
        let t = self.encode_self(&mut g, x)?;
        Ok(g.value(t.pooled).to_vec())
    }
}

/// Patches of a spectrogram without normalization.
pub fn patchify_raw(spec: &LogMelSpectrogram, width: usize, stride: usize) -> Result<Tensor<f32>> {
    if width == 0 || stride == 0 || spec.n_frames < width {
        return Err(Error::shape(format!(
            "cannot cut {}-frame spectrogram into patches of width {width}, stride {stride}",
            spec.n_frames
        )));
    }
    let count = (spec.n_frames - width) / stride + 1;
    let dim = spec.n_mels * width;
    let mut out = Vec::with_capacity(count * dim);
    for i in 0..count {
        let t0 = i * stride;
        for m in 0..spec.n_mels {
            let row = &spec.values[m * spec.n_frames..(m + 1) * spec.n_frames];
            out.extend_from_slice(&row[t0..t0 + width]);
        }
    }
    Tensor::new(vec![count, dim], out)
}
