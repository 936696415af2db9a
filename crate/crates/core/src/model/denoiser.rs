//! Residual MLP denoiser with label-and-time conditioned modulation.
//!
//! Per block: layer-norm with learned affine, an affine modulation
//! `(scale, shift)` computed from the conditioning vector, a SiLU MLP, and
//! a gated residual add. The conditioning vector is the label embedding
//! plus a small MLP over sinusoidal timestep features. The output head is
//! zero-initialized so an untrained model predicts zero noise.
//!
//! Forward and backward are written by hand against the flat parameter
//! registry. The backward pass takes the trainability mask and skips the
//! weight-gradient outer products of frozen tensors (the dominant cost)
//! while still propagating activation gradients, so masked fine-tuning
//! steps are cheaper than full ones without changing any trainable value.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{domain, rng_for, subseed};
use crate::sampler::{EpsModel, Label};
use crate::taxonomy::Taxonomy;

use super::embedder::{TieredEmbedder, EMBED_NULL, EMBED_SUB, EMBED_SUPER};
use super::registry::{Gradients, Param, ParamTag, ParameterRegistry};

const LN_EPS: f64 = 1e-5;

/// Architecture hyperparameters. `n_sub` and `n_super` size the embedding
/// tables and normally come from a taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub dim_in: usize,
    pub width: usize,
    pub depth: usize,
    /// Conditioning dimension shared by label embeddings and the time MLP.
    pub d_cond: usize,
    pub n_sub: usize,
    pub n_super: usize,
}

impl DenoiserConfig {
    pub fn for_taxonomy(
        dim_in: usize,
        width: usize,
        depth: usize,
        d_cond: usize,
        tax: &Taxonomy,
    ) -> Self {
        Self { dim_in, width, depth, d_cond, n_sub: tax.n_sub(), n_super: tax.n_super() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("dim_in", self.dim_in),
            ("width", self.width),
            ("depth", self.depth),
            ("d_cond", self.d_cond),
            ("n_sub", self.n_sub),
            ("n_super", self.n_super),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be >= 1")));
            }
        }
        if self.d_cond % 2 != 0 {
            return Err(Error::invalid("d_cond must be even (sin/cos feature pairs)"));
        }
        Ok(())
    }

    /// Dims that must agree between a pretrained model and an extension.
    fn core(&self) -> (usize, usize, usize, usize) {
        (self.dim_in, self.width, self.depth, self.d_cond)
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockIx {
    ln_scale: usize,
    ln_shift: usize,
    mod_w: usize,
    mod_b: usize,
    mlp_w: usize,
    mlp_b: usize,
    gain: usize,
}

#[derive(Debug, Clone)]
struct Indices {
    stem_w: usize,
    stem_b: usize,
    head_w: usize,
    head_b: usize,
    t_w1: usize,
    t_b1: usize,
    t_w2: usize,
    t_b2: usize,
    e_sub: usize,
    e_sup: usize,
    e_null: usize,
    blocks: Vec<BlockIx>,
}

/// The denoiser: configuration plus its parameter registry.
#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    reg: ParameterRegistry,
    ix: Indices,
}

impl Denoiser {
    /// Fresh model. Weights draw from U(±1/√fan_in), embeddings from
    /// N(0, 0.02²), biases and shifts start at zero, norm scales and block
    /// gains at one, and the output head at exactly zero.
    pub fn init(cfg: &DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut reg = ParameterRegistry::new();
        let w = cfg.width;
        let d = cfg.dim_in;
        let c = cfg.d_cond;

        let mut add = |name: String, tag: ParamTag, shape: Vec<usize>| -> Result<usize> {
            let n: usize = shape.iter().product();
            let idx = reg.len() as u64;
            let mut rng = rng_for(seed, &[domain::MODEL_INIT, idx]);
            let values = init_values(tag, &shape, n, &name, &mut rng);
            reg.add(Param::new(name, tag, shape, values)?)
        };

        let stem_w = add("stem.w".into(), ParamTag::Weight, vec![w, d])?;
        let stem_b = add("stem.b".into(), ParamTag::Bias, vec![w])?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let ln_scale = add(format!("block{l}.ln.scale"), ParamTag::NormScale, vec![w])?;
            let ln_shift = add(format!("block{l}.ln.shift"), ParamTag::NormShift, vec![w])?;
            let mod_w = add(format!("block{l}.mod.w"), ParamTag::Weight, vec![2 * w, c])?;
            let mod_b = add(format!("block{l}.mod.b"), ParamTag::Bias, vec![2 * w])?;
            let mlp_w = add(format!("block{l}.mlp.w"), ParamTag::Weight, vec![w, w])?;
            let mlp_b = add(format!("block{l}.mlp.b"), ParamTag::Bias, vec![w])?;
            let gain = add(format!("block{l}.gain"), ParamTag::BlockScale, vec![w])?;
            blocks.push(BlockIx { ln_scale, ln_shift, mod_w, mod_b, mlp_w, mlp_b, gain });
        }
        let head_w = add("head.w".into(), ParamTag::Weight, vec![d, w])?;
        let head_b = add("head.b".into(), ParamTag::Bias, vec![d])?;
        let t_w1 = add("time.w1".into(), ParamTag::TimeEmbed, vec![c, c])?;
        let t_b1 = add("time.b1".into(), ParamTag::TimeEmbed, vec![c])?;
        let t_w2 = add("time.w2".into(), ParamTag::TimeEmbed, vec![c, c])?;
        let t_b2 = add("time.b2".into(), ParamTag::TimeEmbed, vec![c])?;
        let e_sub = add(EMBED_SUB.into(), ParamTag::EmbeddingSub, vec![cfg.n_sub, c])?;
        let e_sup = add(EMBED_SUPER.into(), ParamTag::EmbeddingSuper, vec![cfg.n_super, c])?;
        let e_null = add(EMBED_NULL.into(), ParamTag::EmbeddingNull, vec![1, c])?;

        let ix = Indices {
            stem_w, stem_b, head_w, head_b, t_w1, t_b1, t_w2, t_b2, e_sub, e_sup, e_null, blocks,
        };
        Ok(Self { cfg: *cfg, reg, ix })
    }

    /// Reassemble from checkpointed parts, verifying every expected tensor
    /// exists with the right shape.
    pub fn from_parts(cfg: DenoiserConfig, mut reg: ParameterRegistry) -> Result<Self> {
        cfg.validate()?;
        reg.reindex()?;
        let template = Denoiser::init(&cfg, 0)?;
        if template.reg.len() != reg.len() {
            return Err(Error::format(format!(
                "expected {} parameters, checkpoint has {}",
                template.reg.len(),
                reg.len()
            )));
        }
        for want in template.reg.iter() {
            let idx = reg
                .index_of(&want.name)
                .map_err(|_| Error::format(format!("checkpoint missing parameter {}", want.name)))?;
            let got = reg.get(idx);
            if got.shape != want.shape || got.tag != want.tag {
                return Err(Error::format(format!(
                    "parameter {} has shape {:?} tag {:?}, expected {:?} {:?}",
                    want.name, got.shape, got.tag, want.shape, want.tag
                )));
            }
        }
        // Adopt template ordering so index-aligned state (optimizer moments,
        // gradients) is stable across checkpoint round-trips.
        let mut ordered = ParameterRegistry::new();
        for want in template.reg.iter() {
            let idx = reg.index_of(&want.name)?;
            ordered.add(reg.get(idx).clone())?;
        }
        Ok(Self { cfg, reg: ordered, ix: template.ix })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn registry(&self) -> &ParameterRegistry {
        &self.reg
    }

    pub fn registry_mut(&mut self) -> &mut ParameterRegistry {
        &mut self.reg
    }

    pub fn embedder(&self) -> TieredEmbedder<'_> {
        TieredEmbedder::from_registry(&self.reg).expect("registry is well-formed")
    }

    /// Move every parameter off its initialization point. Gradient checks
    /// need this: the zero head and zero biases of a fresh model hide
    /// entire backward paths.
    pub fn randomize_all(&mut self, seed: u64, scale: f64) {
        for idx in 0..self.reg.len() {
            let mut rng = rng_for(seed, &[domain::MODEL_INIT, 0xf00d, idx as u64]);
            for v in &mut self.reg.get_mut(idx).values {
                *v += scale * (rng.random::<f64>() * 2.0 - 1.0);
            }
        }
    }

    fn vals(&self, idx: usize) -> &[f64] {
        &self.reg.get(idx).values
    }

    /// Sinusoidal timestep features of dimension `d_cond`.
    fn time_features(&self, t: usize) -> Vec<f64> {
        let half = self.cfg.d_cond / 2;
        let mut f = vec![0.0; self.cfg.d_cond];
        for k in 0..half {
            let freq = (-(k as f64) * (10_000f64).ln() / half as f64).exp();
            let angle = t as f64 * freq;
            f[2 * k] = angle.sin();
            f[2 * k + 1] = angle.cos();
        }
        f
    }

    pub(crate) fn forward_cached(
        &self,
        x: &[f64],
        t: usize,
        label: Label,
    ) -> Result<(Vec<f64>, Cache)> {
        if x.len() != self.cfg.dim_in {
            return Err(Error::invalid(format!(
                "input has dimension {}, model expects {}",
                x.len(),
                self.cfg.dim_in
            )));
        }
        if t == 0 {
            return Err(Error::invalid("timestep is 1-based; got 0"));
        }
        let w = self.cfg.width;
        let c_dim = self.cfg.d_cond;

        // conditioning: label embedding + time MLP
        let t_feat = self.time_features(t);
        let mut zt = matvec(self.vals(self.ix.t_w1), &t_feat, c_dim, c_dim);
        add_assign(&mut zt, self.vals(self.ix.t_b1));
        let a: Vec<f64> = zt.iter().map(|&z| silu(z)).collect();
        let mut cond = matvec(self.vals(self.ix.t_w2), &a, c_dim, c_dim);
        add_assign(&mut cond, self.vals(self.ix.t_b2));
        let emb = self.embedder().embed_label(label)?;
        add_assign(&mut cond, emb);

        // stem
        let mut h = matvec(self.vals(self.ix.stem_w), x, w, self.cfg.dim_in);
        add_assign(&mut h, self.vals(self.ix.stem_b));
        let h0 = h.clone();

        let mut blocks = Vec::with_capacity(self.cfg.depth);
        for bix in &self.ix.blocks {
            let mean = h.iter().sum::<f64>() / w as f64;
            let var = h.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            let n: Vec<f64> = h.iter().map(|&v| (v - mean) * r).collect();
            let gamma = self.vals(bix.ln_scale);
            let beta = self.vals(bix.ln_shift);
            let u: Vec<f64> =
                n.iter().zip(gamma).zip(beta).map(|((&ni, &g), &b)| ni * g + b).collect();

            let mut sb = matvec(self.vals(bix.mod_w), &cond, 2 * w, c_dim);
            add_assign(&mut sb, self.vals(bix.mod_b));
            let (s, shift) = sb.split_at(w);
            let v: Vec<f64> = u
                .iter()
                .zip(s)
                .zip(shift)
                .map(|((&ui, &si), &bi)| ui * (1.0 + si) + bi)
                .collect();

            let mut z = matvec(self.vals(bix.mlp_w), &v, w, w);
            add_assign(&mut z, self.vals(bix.mlp_b));
            let act: Vec<f64> = z.iter().map(|&zi| silu(zi)).collect();

            let gain = self.vals(bix.gain);
            for i in 0..w {
                h[i] += gain[i] * act[i];
            }
            blocks.push(BlockCache {
                n,
                r,
                u,
                s: s.to_vec(),
                v,
                z,
                act,
            });
        }

        let mut out = matvec(self.vals(self.ix.head_w), &h, self.cfg.dim_in, w);
        add_assign(&mut out, self.vals(self.ix.head_b));

        let cache = Cache { x: x.to_vec(), t_feat, zt, a, cond, label, h0, blocks, h_final: h };
        Ok((out, cache))
    }

    /// Accumulate parameter gradients for one sample into `grads`, given
    /// `g_out = dL/d(out)`. Frozen tensors (mask false) receive nothing and
    /// their outer products are skipped; activation gradients still flow.
    pub(crate) fn backward(
        &self,
        cache: &Cache,
        g_out: &[f64],
        mask: &[bool],
        grads: &mut Gradients,
    ) {
        let w = self.cfg.width;
        let d = self.cfg.dim_in;
        let c_dim = self.cfg.d_cond;
        let ix = &self.ix;

        let need_embed = mask[ix.e_sub] || mask[ix.e_sup] || mask[ix.e_null];
        let need_time = mask[ix.t_w1] || mask[ix.t_b1] || mask[ix.t_w2] || mask[ix.t_b2];
        let need_cond = need_embed || need_time;

        // head
        if mask[ix.head_w] {
            outer_acc(&mut grads.per_param[ix.head_w], g_out, &cache.h_final);
        }
        if mask[ix.head_b] {
            add_assign(&mut grads.per_param[ix.head_b], g_out);
        }
        let mut g_h = matvec_t(self.vals(ix.head_w), g_out, d, w);

        let mut g_cond = vec![0.0; c_dim];
        for (bix, bc) in ix.blocks.iter().zip(&cache.blocks).rev() {
            // h_out = h_in + gain ⊙ act
            if mask[bix.gain] {
                let g = &mut grads.per_param[bix.gain];
                for i in 0..w {
                    g[i] += g_h[i] * bc.act[i];
                }
            }
            let gain = self.vals(bix.gain);
            let mut g_z = vec![0.0; w];
            for i in 0..w {
                g_z[i] = g_h[i] * gain[i] * silu_prime(bc.z[i]);
            }
            if mask[bix.mlp_w] {
                outer_acc(&mut grads.per_param[bix.mlp_w], &g_z, &bc.v);
            }
            if mask[bix.mlp_b] {
                add_assign(&mut grads.per_param[bix.mlp_b], &g_z);
            }
            let g_v = matvec_t(self.vals(bix.mlp_w), &g_z, w, w);

            // v = u ⊙ (1 + s) + shift
            let mut g_u = vec![0.0; w];
            let mut g_sb = vec![0.0; 2 * w];
            for i in 0..w {
                g_u[i] = g_v[i] * (1.0 + bc.s[i]);
                g_sb[i] = g_v[i] * bc.u[i]; // scale half
                g_sb[w + i] = g_v[i]; // shift half
            }
            if mask[bix.mod_w] {
                outer_acc(&mut grads.per_param[bix.mod_w], &g_sb, &cache.cond);
            }
            if mask[bix.mod_b] {
                add_assign(&mut grads.per_param[bix.mod_b], &g_sb);
            }
            if need_cond {
                let g = matvec_t(self.vals(bix.mod_w), &g_sb, 2 * w, c_dim);
                add_assign(&mut g_cond, &g);
            }

            // u = n ⊙ γ + β
            if mask[bix.ln_scale] {
                let g = &mut grads.per_param[bix.ln_scale];
                for i in 0..w {
                    g[i] += g_u[i] * bc.n[i];
                }
            }
            if mask[bix.ln_shift] {
                add_assign(&mut grads.per_param[bix.ln_shift], &g_u);
            }
            let gamma = self.vals(bix.ln_scale);
            let g_n: Vec<f64> = (0..w).map(|i| g_u[i] * gamma[i]).collect();
            let m1 = g_n.iter().sum::<f64>() / w as f64;
            let m2 = g_n.iter().zip(&bc.n).map(|(&g, &n)| g * n).sum::<f64>() / w as f64;
            // residual path plus the normalized branch
            for i in 0..w {
                g_h[i] += bc.r * (g_n[i] - m1 - bc.n[i] * m2);
            }
        }

        // stem
        if mask[ix.stem_w] {
            outer_acc(&mut grads.per_param[ix.stem_w], &g_h, &cache.x);
        }
        if mask[ix.stem_b] {
            add_assign(&mut grads.per_param[ix.stem_b], &g_h);
        }

        if !need_cond {
            return;
        }
        // embedding row for this sample's label
        let (table, row, table_trainable) = match cache.label {
            Label::Subclass(i) => (ix.e_sub, i, mask[ix.e_sub]),
            Label::Superclass(i) => (ix.e_sup, i, mask[ix.e_sup]),
            Label::Null => (ix.e_null, 0, mask[ix.e_null]),
        };
        if table_trainable {
            let g = &mut grads.per_param[table];
            for j in 0..c_dim {
                g[row * c_dim + j] += g_cond[j];
            }
        }
        if need_time {
            if mask[ix.t_w2] {
                outer_acc(&mut grads.per_param[ix.t_w2], &g_cond, &cache.a);
            }
            if mask[ix.t_b2] {
                add_assign(&mut grads.per_param[ix.t_b2], &g_cond);
            }
            let g_a = matvec_t(self.vals(ix.t_w2), &g_cond, c_dim, c_dim);
            let g_zt: Vec<f64> =
                g_a.iter().zip(&cache.zt).map(|(&g, &z)| g * silu_prime(z)).collect();
            if mask[ix.t_w1] {
                outer_acc(&mut grads.per_param[ix.t_w1], &g_zt, &cache.t_feat);
            }
            if mask[ix.t_b1] {
                add_assign(&mut grads.per_param[ix.t_b1], &g_zt);
            }
        }
    }

    /// Predict the noise component of `x` at step `t` under `label`.
    pub fn forward(&self, x: &[f64], t: usize, label: Label) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x, t, label)?.0)
    }
}

impl EpsModel for Denoiser {
    fn dim(&self) -> usize {
        self.cfg.dim_in
    }

    fn eps(&self, x: &[f64], t: usize, label: Label) -> Result<Vec<f64>> {
        self.forward(x, t, label)
    }
}

/// New model for `tax` that keeps everything a pretrained model learned.
/// Tensors whose shapes match are copied verbatim (the null row always
/// matches); embedding tables whose row counts changed are freshly
/// initialized from `seed`. Core architecture dims must agree.
pub fn load_pretrained_then_extend(
    pretrained: &Denoiser,
    tax: &Taxonomy,
    seed: u64,
) -> Result<Denoiser> {
    let old = pretrained.config();
    let cfg = DenoiserConfig {
        n_sub: tax.n_sub(),
        n_super: tax.n_super(),
        ..*old
    };
    if cfg.core() != old.core() {
        return Err(Error::invalid("extension cannot change core architecture dims"));
    }
    let fresh_seed = subseed(seed, &[domain::EXTEND_EMBEDDER]);
    let mut model = Denoiser::init(&cfg, fresh_seed)?;
    for idx in 0..model.reg.len() {
        let name = model.reg.get(idx).name.clone();
        let src_idx = pretrained.reg.index_of(&name)?;
        let src = pretrained.reg.get(src_idx);
        let dst = model.reg.get_mut(idx);
        if src.shape == dst.shape {
            dst.values.copy_from_slice(&src.values);
        }
    }
    Ok(model)
}

struct BlockCache {
    n: Vec<f64>,
    r: f64,
    u: Vec<f64>,
    s: Vec<f64>,
    v: Vec<f64>,
    z: Vec<f64>,
    act: Vec<f64>,
}

pub(crate) struct Cache {
    x: Vec<f64>,
    t_feat: Vec<f64>,
    zt: Vec<f64>,
    a: Vec<f64>,
    cond: Vec<f64>,
    label: Label,
    #[allow(dead_code)]
    h0: Vec<f64>,
    blocks: Vec<BlockCache>,
    h_final: Vec<f64>,
}

fn init_values(
    tag: ParamTag,
    shape: &[usize],
    n: usize,
    name: &str,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<f64> {
    use rand_distr::{Distribution, Normal};
    match tag {
        ParamTag::Weight | ParamTag::TimeEmbed if shape.len() == 2 => {
            if name == "head.w" {
                vec![0.0; n]
            } else {
                let k = 1.0 / (shape[1] as f64).sqrt();
                (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * k).collect()
            }
        }
        ParamTag::EmbeddingSub | ParamTag::EmbeddingSuper | ParamTag::EmbeddingNull => {
            let normal = Normal::new(0.0, 0.02).expect("valid std");
            (0..n).map(|_| normal.sample(rng)).collect()
        }
        ParamTag::NormScale | ParamTag::BlockScale => vec![1.0; n],
        // biases, norm shifts, and 1-D time tensors start at zero
        _ => vec![0.0; n],
    }
}

fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

fn silu_prime(z: f64) -> f64 {
    let s = 1.0 / (1.0 + (-z).exp());
    s * (1.0 + z * (1.0 - s))
}

/// `y = W·x` for row-major `W` of shape `[rows, cols]`.
fn matvec(w: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    let mut y = vec![0.0; rows];
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for (wi, xi) in row.iter().zip(x) {
            acc += wi * xi;
        }
        y[r] = acc;
    }
    y
}

/// `y = Wᵀ·g` for row-major `W` of shape `[rows, cols]`.
fn matvec_t(w: &[f64], g: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(g.len(), rows);
    let mut y = vec![0.0; cols];
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let gr = g[r];
        for (yi, wi) in y.iter_mut().zip(row) {
            *yi += wi * gr;
        }
    }
    y
}

/// `a += b` elementwise.
fn add_assign(a: &mut [f64], b: &[f64]) {
    debug_assert_eq!(a.len(), b.len());
    for (ai, bi) in a.iter_mut().zip(b) {
        *ai += bi;
    }
}

/// `G += g ⊗ x` flattened row-major.
fn outer_acc(gw: &mut [f64], g: &[f64], x: &[f64]) {
    debug_assert_eq!(gw.len(), g.len() * x.len());
    let cols = x.len();
    for (r, &gr) in g.iter().enumerate() {
        let row = &mut gw[r * cols..(r + 1) * cols];
        for (o, xi) in row.iter_mut().zip(x) {
            *o += gr * xi;
        }
    }
}
