//! The bandwidth network: neighbourhood → lower-triangular factor.
//!
//! Neighbour offsets are divided by their RMS length `s` before entering the
//! network and the output factor is multiplied back by `s`, so the map is
//! equivariant to rescaling the sample.
//!
//! ```text
//! f_ℓ  = [r_ℓ/s, ‖r_ℓ‖/s]                    e_ℓ = tanh(W_e f_ℓ + b_e)
//! c⁰   = mean_ℓ e_ℓ
//! block:  a_hℓ = q_h·k_hℓ/√d_h − softplus(β_h)‖r_ℓ‖/s,   q = W_q c, k_ℓ = W_k e_ℓ
//!         o_h  = Σ_ℓ softmax(a_h)_ℓ (W_v e_ℓ ⊙ σ(W_g r̂_ℓ + b_g))_h
//!         c   += W_o (o ⊙ mask);   c += W_2 tanh(W_1 c + b_1) + b_2
//! head:   u = W_h c + b_h,  L_jj = s·exp(clip(u_jj)),  L_ij = s·κ·σ(u_last)·u_ij
//! ```

use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::neighborhoods::NeighborhoodMatrix;
use crate::error::{check_dim, Error, Result};
use crate::kernel::{packed_index, packed_len, BandwidthFactor};

/// Neighbourhood scales below this are treated as this (all neighbours coincide).
pub const MIN_SCALE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub d: usize,
    pub k_nn: usize,
    pub hidden: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub diag_clip_lo: f64,
    pub diag_clip_hi: f64,
    pub offdiag_scale: f64,
}

impl ArchConfig {
    /// The small network used for CPU pre-training.
    pub fn desk(d: usize) -> Self {
        Self {
            d,
            k_nn: 16,
            hidden: 32,
            n_blocks: 2,
            n_heads: 2,
            dropout: 0.1,
            diag_clip_lo: -6.0,
            diag_clip_hi: 3.0,
            offdiag_scale: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("architecture: {m}")));
        if self.d == 0 || self.k_nn == 0 || self.hidden == 0 || self.n_blocks == 0 || self.n_heads == 0 {
            return bad("all sizes must be positive");
        }
        if !self.hidden.is_multiple_of(self.n_heads) {
            return bad("hidden width must be divisible by the head count");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.diag_clip_lo < self.diag_clip_hi) || !self.diag_clip_lo.is_finite() || !self.diag_clip_hi.is_finite() {
            return bad("diagonal clip range must be finite and non-empty");
        }
        if !(self.offdiag_scale >= 0.0 && self.offdiag_scale.is_finite()) {
            return bad("off-diagonal scale must be finite and non-negative");
        }
        Ok(())
    }

    pub fn head_size(&self) -> usize {
        packed_len(self.d) + 1
    }

    fn head_dim(&self) -> usize {
        self.hidden / self.n_heads
    }
}

/// One named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockOffsets {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    beta: usize,
    wg: usize,
    bg: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    embed_w: usize,
    embed_b: usize,
    blocks: Vec<BlockOffsets>,
    head_w: usize,
    head_b: usize,
    manifest: Vec<TensorInfo>,
    total: usize,
}

impl Layout {
    fn new(arch: &ArchConfig) -> Self {
        let (h, d, p) = (arch.hidden, arch.d, arch.head_size());
        let mut manifest = Vec::new();
        let mut total = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let offset = total;
            total += shape.iter().product::<usize>();
            manifest.push(TensorInfo { name, shape, offset });
            offset
        };
        let embed_w = push("embed.w".into(), vec![h, d + 1]);
        let embed_b = push("embed.b".into(), vec![h]);
        let blocks = (0..arch.n_blocks)
            .map(|b| BlockOffsets {
                wq: push(format!("block{b}.wq"), vec![h, h]),
                wk: push(format!("block{b}.wk"), vec![h, h]),
                wv: push(format!("block{b}.wv"), vec![h, h]),
                wo: push(format!("block{b}.wo"), vec![h, h]),
                beta: push(format!("block{b}.beta"), vec![arch.n_heads]),
                wg: push(format!("block{b}.wg"), vec![h, d]),
                bg: push(format!("block{b}.bg"), vec![h]),
                w1: push(format!("block{b}.w1"), vec![h, h]),
                b1: push(format!("block{b}.b1"), vec![h]),
                w2: push(format!("block{b}.w2"), vec![h, h]),
                b2: push(format!("block{b}.b2"), vec![h]),
            })
            .collect();
        let head_w = push("head.w".into(), vec![p, h]);
        let head_b = push("head.b".into(), vec![p]);
        Self { embed_w, embed_b, blocks, head_w, head_b, manifest, total }
    }
}

/// Architecture plus a flat parameter vector laid out per [`RecommenderParams::manifest`].
#[derive(Debug, Clone)]
pub struct RecommenderParams {
    arch: ArchConfig,
    layout: Layout,
    values: Vec<f64>,
}

impl PartialEq for RecommenderParams {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.values == other.values
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// `out = W x` for row-major `W` of shape `rows × cols`.
fn matvec(w: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

/// `dx += Wᵀ dy`.
fn matvec_t_add(w: &[f64], cols: usize, dy: &[f64], dx: &mut [f64]) {
    for (g, row) in dy.iter().zip(w.chunks_exact(cols)) {
        if *g != 0.0 {
            for (a, b) in dx.iter_mut().zip(row) {
                *a += g * b;
            }
        }
    }
}

/// `gW += dy xᵀ`.
fn outer_add(gw: &mut [f64], cols: usize, dy: &[f64], x: &[f64]) {
    for (g, row) in dy.iter().zip(gw.chunks_exact_mut(cols)) {
        if *g != 0.0 {
            for (a, b) in row.iter_mut().zip(x) {
                *a += g * b;
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

#[derive(Debug, Clone)]
struct BlockTrace {
    c_in: Vec<f64>,
    q: Vec<f64>,
    keys: Vec<f64>,
    vals: Vec<f64>,
    gates: Vec<f64>,
    probs: Vec<f64>,
    attn: Vec<f64>,
    c_mid: Vec<f64>,
    ff: Vec<f64>,
}

/// Intermediate activations of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    scale: f64,
    feats: Vec<f64>,
    dirs: Vec<f64>,
    radii: Vec<f64>,
    emb: Vec<f64>,
    blocks: Vec<BlockTrace>,
    c_out: Vec<f64>,
    head: Vec<f64>,
    factor: Vec<f64>,
}

impl Trace {
    pub(crate) fn factor(&self) -> &[f64] {
        &self.factor
    }
}

impl RecommenderParams {
    /// Glorot-uniform weights, zero biases, unit distance bias.
    pub fn init(arch: ArchConfig, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let mut values = vec![0.0; layout.total];
        for t in &layout.manifest {
            let slot = &mut values[t.offset..t.offset + t.len()];
            if t.name.ends_with(".beta") {
                // softplus(β) = 1
                slot.fill((std::f64::consts::E - 1.0).ln());
            } else if t.shape.len() == 2 {
                let a = (6.0 / (t.shape[0] + t.shape[1]) as f64).sqrt();
                let u = Uniform::new_inclusive(-a, a).expect("valid range");
                for v in slot {
                    *v = u.sample(rng);
                }
            }
        }
        Ok(Self { arch, layout, values })
    }

    pub fn from_values(arch: ArchConfig, values: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        check_dim(layout.total, values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("recommender weights".into()));
        }
        Ok(Self { arch, layout, values })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn manifest(&self) -> &[TensorInfo] {
        &self.layout.manifest
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn slice(&self, offset: usize, len: usize) -> &[f64] {
        &self.values[offset..offset + len]
    }

    /// One dropout mask per block (entries `0` or `1/(1−p)`).
    pub fn dropout_masks(&self, rng: &mut impl Rng) -> Vec<Vec<f64>> {
        let p = self.arch.dropout;
        let keep = Bernoulli::new(1.0 - p).expect("dropout validated");
        let scale = 1.0 / (1.0 - p);
        (0..self.arch.n_blocks)
            .map(|_| (0..self.arch.hidden).map(|_| if keep.sample(rng) { scale } else { 0.0 }).collect())
            .collect()
    }

    fn check_input(&self, nbh: &NeighborhoodMatrix) -> Result<()> {
        check_dim(self.arch.d, nbh.d())?;
        if nbh.k_nn() != self.arch.k_nn {
            return Err(Error::InvalidArgument(format!(
                "network expects {} neighbours, got {}",
                self.arch.k_nn,
                nbh.k_nn()
            )));
        }
        Ok(())
    }

    /// Bandwidth factor for one neighbourhood. `masks` switches on training-mode dropout.
    pub fn recommend(&self, nbh: &NeighborhoodMatrix, masks: Option<&[Vec<f64>]>) -> Result<BandwidthFactor> {
        let trace = self.forward(nbh, masks)?;
        BandwidthFactor::new(self.arch.d, trace.factor)
    }

    pub(crate) fn forward(&self, nbh: &NeighborhoodMatrix, masks: Option<&[Vec<f64>]>) -> Result<Trace> {
        self.check_input(nbh)?;
        let a = &self.arch;
        let (d, k, h, nh, dh) = (a.d, a.k_nn, a.hidden, a.n_heads, a.head_dim());
        let lay = &self.layout;
        let scale = nbh.rms_distance().max(MIN_SCALE);

        let mut feats = vec![0.0; k * (d + 1)];
        let mut dirs = vec![0.0; k * d];
        let mut radii = vec![0.0; k];
        for (l, r) in nbh.rows().enumerate() {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            let f = &mut feats[l * (d + 1)..(l + 1) * (d + 1)];
            for (fi, ri) in f.iter_mut().zip(r) {
                *fi = ri / scale;
            }
            f[d] = norm / scale;
            radii[l] = norm / scale;
            if norm > 0.0 {
                for (u, ri) in dirs[l * d..(l + 1) * d].iter_mut().zip(r) {
                    *u = ri / norm;
                }
            }
        }

        let we = self.slice(lay.embed_w, h * (d + 1));
        let be = self.slice(lay.embed_b, h);
        let mut emb = vec![0.0; k * h];
        for l in 0..k {
            let e = &mut emb[l * h..(l + 1) * h];
            matvec(we, d + 1, &feats[l * (d + 1)..(l + 1) * (d + 1)], e);
            for (v, b) in e.iter_mut().zip(be) {
                *v = (*v + b).tanh();
            }
        }
        let mut c = vec![0.0; h];
        for e in emb.chunks_exact(h) {
            add_into(&mut c, e);
        }
        c.iter_mut().for_each(|v| *v /= k as f64);

        let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();
        let mut blocks = Vec::with_capacity(a.n_blocks);
        for (bi, off) in lay.blocks.iter().enumerate() {
            let c_in = c.clone();
            let mut q = vec![0.0; h];
            matvec(self.slice(off.wq, h * h), h, &c_in, &mut q);
            let mut keys = vec![0.0; k * h];
            let mut vals = vec![0.0; k * h];
            let mut gates = vec![0.0; k * h];
            let (wk, wv) = (self.slice(off.wk, h * h), self.slice(off.wv, h * h));
            let (wg, bg) = (self.slice(off.wg, h * d), self.slice(off.bg, h));
            for l in 0..k {
                let e = &emb[l * h..(l + 1) * h];
                matvec(wk, h, e, &mut keys[l * h..(l + 1) * h]);
                matvec(wv, h, e, &mut vals[l * h..(l + 1) * h]);
                let g = &mut gates[l * h..(l + 1) * h];
                matvec(wg, d, &dirs[l * d..(l + 1) * d], g);
                for (v, b) in g.iter_mut().zip(bg) {
                    *v = sigmoid(*v + b);
                }
            }
            let beta = self.slice(off.beta, nh);
            let mut probs = vec![0.0; nh * k];
            let mut attn = vec![0.0; h];
            for hd in 0..nh {
                let span = hd * dh..(hd + 1) * dh;
                let bias = softplus(beta[hd]);
                let p = &mut probs[hd * k..(hd + 1) * k];
                for l in 0..k {
                    let kl = &keys[l * h..(l + 1) * h][span.clone()];
                    let dot: f64 = q[span.clone()].iter().zip(kl).map(|(x, y)| x * y).sum();
                    p[l] = dot * inv_sqrt_dh - bias * radii[l];
                }
                let mx = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in p.iter_mut() {
                    *v = (*v - mx).exp();
                    z += *v;
                }
                for v in p.iter_mut() {
                    *v /= z;
                }
                for l in 0..k {
                    for i in span.clone() {
                        attn[i] += p[l] * vals[l * h + i] * gates[l * h + i];
                    }
                }
            }
            let mut dropped = attn.clone();
            if let Some(m) = masks {
                for (v, mk) in dropped.iter_mut().zip(&m[bi]) {
                    *v *= mk;
                }
            }
            let mut delta = vec![0.0; h];
            matvec(self.slice(off.wo, h * h), h, &dropped, &mut delta);
            let c_mid: Vec<f64> = c_in.iter().zip(&delta).map(|(x, y)| x + y).collect();
            let mut ff = vec![0.0; h];
            matvec(self.slice(off.w1, h * h), h, &c_mid, &mut ff);
            for (v, b) in ff.iter_mut().zip(self.slice(off.b1, h)) {
                *v = (*v + b).tanh();
            }
            matvec(self.slice(off.w2, h * h), h, &ff, &mut delta);
            for ((cv, m), (dv, b)) in c.iter_mut().zip(&c_mid).zip(delta.iter().zip(self.slice(off.b2, h))) {
                *cv = m + dv + b;
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation { block: bi });
            }
            blocks.push(BlockTrace { c_in, q, keys, vals, gates, probs, attn, c_mid, ff });
        }

        let p = a.head_size();
        let mut head = vec![0.0; p];
        matvec(self.slice(lay.head_w, p * h), h, &c, &mut head);
        add_into(&mut head, self.slice(lay.head_b, p));
        if head.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation { block: a.n_blocks });
        }
        let gate = sigmoid(head[p - 1]);
        let mut factor = vec![0.0; p - 1];
        for i in 0..d {
            for j in 0..=i {
                let idx = packed_index(i, j);
                factor[idx] = if i == j {
                    scale * head[idx].clamp(a.diag_clip_lo, a.diag_clip_hi).exp()
                } else {
                    scale * a.offdiag_scale * gate * head[idx]
                };
            }
        }
        Ok(Trace { scale, feats, dirs, radii, emb, blocks, c_out: c, head, factor })
    }

    /// Accumulates `∂ℓ/∂θ` into `grad` given `∂ℓ/∂L` (packed) for one forward pass.
    pub(crate) fn backward(&self, trace: &Trace, d_factor: &[f64], masks: Option<&[Vec<f64>]>, grad: &mut [f64]) {
        let a = &self.arch;
        let (d, k, h, nh, dh) = (a.d, a.k_nn, a.hidden, a.n_heads, a.head_dim());
        let lay = &self.layout;
        let p = a.head_size();
        let s = trace.scale;

        let gate = sigmoid(trace.head[p - 1]);
        let mut dhead = vec![0.0; p];
        for i in 0..d {
            for j in 0..=i {
                let idx = packed_index(i, j);
                let g = d_factor[idx];
                if i == j {
                    let raw = trace.head[idx];
                    if raw > a.diag_clip_lo && raw < a.diag_clip_hi {
                        dhead[idx] += g * trace.factor[idx];
                    }
                } else {
                    dhead[idx] += g * s * a.offdiag_scale * gate;
                    dhead[p - 1] += g * s * a.offdiag_scale * gate * (1.0 - gate) * trace.head[idx];
                }
            }
        }
        outer_add(&mut grad[lay.head_w..lay.head_w + p * h], h, &dhead, &trace.c_out);
        add_into(&mut grad[lay.head_b..lay.head_b + p], &dhead);
        let mut dc = vec![0.0; h];
        matvec_t_add(self.slice(lay.head_w, p * h), h, &dhead, &mut dc);

        let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();
        let mut demb = vec![0.0; k * h];
        for (bi, (off, bt)) in lay.blocks.iter().zip(&trace.blocks).enumerate().rev() {
            // feed-forward
            add_into(&mut grad[off.b2..off.b2 + h], &dc);
            outer_add(&mut grad[off.w2..off.w2 + h * h], h, &dc, &bt.ff);
            let mut dpre = vec![0.0; h];
            matvec_t_add(self.slice(off.w2, h * h), h, &dc, &mut dpre);
            for (g, f) in dpre.iter_mut().zip(&bt.ff) {
                *g *= 1.0 - f * f;
            }
            add_into(&mut grad[off.b1..off.b1 + h], &dpre);
            outer_add(&mut grad[off.w1..off.w1 + h * h], h, &dpre, &bt.c_mid);
            let mut dmid = dc.clone();
            matvec_t_add(self.slice(off.w1, h * h), h, &dpre, &mut dmid);

            // attention output projection and dropout
            let mut dropped = bt.attn.clone();
            if let Some(m) = masks {
                for (v, mk) in dropped.iter_mut().zip(&m[bi]) {
                    *v *= mk;
                }
            }
            outer_add(&mut grad[off.wo..off.wo + h * h], h, &dmid, &dropped);
            let mut dattn = vec![0.0; h];
            matvec_t_add(self.slice(off.wo, h * h), h, &dmid, &mut dattn);
            if let Some(m) = masks {
                for (v, mk) in dattn.iter_mut().zip(&m[bi]) {
                    *v *= mk;
                }
            }
            let mut dcin = dmid;

            let mut dq = vec![0.0; h];
            let mut dkeys = vec![0.0; k * h];
            let mut dvals = vec![0.0; k * h];
            let mut dgate_pre = vec![0.0; k * h];
            let beta = self.slice(off.beta, nh);
            for hd in 0..nh {
                let span = hd * dh..(hd + 1) * dh;
                let probs = &bt.probs[hd * k..(hd + 1) * k];
                let mut dprob = vec![0.0; k];
                for l in 0..k {
                    let row = l * h;
                    for i in span.clone() {
                        let gated = bt.vals[row + i] * bt.gates[row + i];
                        dprob[l] += dattn[i] * gated;
                        let dgated = probs[l] * dattn[i];
                        dvals[row + i] += dgated * bt.gates[row + i];
                        let g = bt.gates[row + i];
                        dgate_pre[row + i] += dgated * bt.vals[row + i] * g * (1.0 - g);
                    }
                }
                let mean: f64 = probs.iter().zip(&dprob).map(|(p, dp)| p * dp).sum();
                let mut dbeta = 0.0;
                for l in 0..k {
                    let da = probs[l] * (dprob[l] - mean);
                    if da == 0.0 {
                        continue;
                    }
                    let row = l * h;
                    for i in span.clone() {
                        dq[i] += da * bt.keys[row + i] * inv_sqrt_dh;
                        dkeys[row + i] += da * bt.q[i] * inv_sqrt_dh;
                    }
                    dbeta -= da * trace.radii[l];
                }
                grad[off.beta + hd] += dbeta * sigmoid(beta[hd]);
            }
            outer_add(&mut grad[off.wq..off.wq + h * h], h, &dq, &bt.c_in);
            matvec_t_add(self.slice(off.wq, h * h), h, &dq, &mut dcin);
            let (wk, wv) = (self.slice(off.wk, h * h), self.slice(off.wv, h * h));
            for l in 0..k {
                let e = &trace.emb[l * h..(l + 1) * h];
                let (dk, dv, dg) = (&dkeys[l * h..(l + 1) * h], &dvals[l * h..(l + 1) * h], &dgate_pre[l * h..(l + 1) * h]);
                outer_add(&mut grad[off.wk..off.wk + h * h], h, dk, e);
                outer_add(&mut grad[off.wv..off.wv + h * h], h, dv, e);
                let de = &mut demb[l * h..(l + 1) * h];
                matvec_t_add(wk, h, dk, de);
                matvec_t_add(wv, h, dv, de);
                outer_add(&mut grad[off.wg..off.wg + h * d], d, dg, &trace.dirs[l * d..(l + 1) * d]);
                add_into(&mut grad[off.bg..off.bg + h], dg);
            }
            dc = dcin;
        }

        // pooling and embedding
        let inv_k = 1.0 / k as f64;
        for l in 0..k {
            let e = &trace.emb[l * h..(l + 1) * h];
            let mut dpre: Vec<f64> = demb[l * h..(l + 1) * h].iter().zip(&dc).map(|(x, y)| x + y * inv_k).collect();
            for (g, v) in dpre.iter_mut().zip(e) {
                *g *= 1.0 - v * v;
            }
            outer_add(&mut grad[lay.embed_w..lay.embed_w + h * (d + 1)], d + 1, &dpre, &trace.feats[l * (d + 1)..(l + 1) * (d + 1)]);
            add_into(&mut grad[lay.embed_b..lay.embed_b + h], &dpre);
        }
    }
}
