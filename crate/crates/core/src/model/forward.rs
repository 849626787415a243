use std::collections::BTreeMap;

use rand::seq::index;

use super::{Batch, ColaActivation, LayerKind, ModelConfig, ParamKey, ParamSet, Part, Role};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix, SeededRng};

type M = Matrix<f64>;

/// A decoder bound to one configuration. Holds the derived, non-trainable
/// state: rotary tables and the fixed sparse supports of SLTrain layers.
#[derive(Clone, Debug)]
pub struct TinyLm {
    cfg: ModelConfig,
    masks: BTreeMap<(usize, Role), Vec<bool>>,
    rope_cos: Vec<f64>,
    rope_sin: Vec<f64>,
}

enum LinAux {
    Dense,
    Adapter { u: M },
    Cola { z: M, h: M },
    Sltrain { w: M },
}

struct BlockCache {
    x: M,
    inv1: Vec<f64>,
    xn1: M,
    q_aux: LinAux,
    k_aux: LinAux,
    v_aux: LinAux,
    q: M,
    k: M,
    v: M,
    probs: Vec<f64>,
    att: M,
    o_aux: LinAux,
    x_mid: M,
    inv2: Vec<f64>,
    xn2: M,
    gate_aux: LinAux,
    up_aux: LinAux,
    gate: M,
    up: M,
    act: M,
    down_aux: LinAux,
}

struct Trace {
    blocks: Vec<BlockCache>,
    x_last: M,
    inv_final: Vec<f64>,
    hidden_final: M,
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

impl TinyLm {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let problems = cfg.violations();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let masks = if cfg.layer_kind == LayerKind::Sltrain { sparse_supports(&cfg) } else { BTreeMap::new() };
        let half = cfg.head_dim() / 2;
        let mut rope_cos = Vec::with_capacity(cfg.max_seq_len * half);
        let mut rope_sin = Vec::with_capacity(cfg.max_seq_len * half);
        for t in 0..cfg.max_seq_len {
            for i in 0..half {
                let freq = cfg.rope_base.powf(-2.0 * i as f64 / cfg.head_dim() as f64);
                let angle = t as f64 * freq;
                rope_cos.push(angle.cos());
                rope_sin.push(angle.sin());
            }
        }
        Ok(Self { cfg, masks, rope_cos, rope_sin })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn init_params(&self) -> ParamSet {
        super::init_params(&self.cfg)
    }

    /// Fixed support of the sparse component of an SLTrain projection.
    pub fn sparse_mask(&self, layer: usize, role: Role) -> Option<&[bool]> {
        self.masks.get(&(layer, role)).map(Vec::as_slice)
    }

    /// Mean next-token cross-entropy over every position that has a target.
    pub fn forward_loss(&self, params: &ParamSet, batch: &Batch) -> Result<f64> {
        let trace = self.run(params, batch)?;
        let logits = self.head_logits(params, &trace)?;
        Ok(cross_entropy(&logits, batch, None))
    }

    /// Output logits, one row per token position (`rows · seq_len` rows).
    pub fn logits(&self, params: &ParamSet, batch: &Batch) -> Result<M> {
        let trace = self.run(params, batch)?;
        self.head_logits(params, &trace)
    }

    /// Hidden states `H⁽⁰⁾ … H⁽ᴸ⁾`: the embedding output, the residual stream
    /// after each block, and for the last block additionally the final RMSNorm.
    pub fn capture_hidden_states(&self, params: &ParamSet, batch: &Batch) -> Result<Vec<M>> {
        let trace = self.run(params, batch)?;
        let mut out: Vec<M> = trace.blocks.into_iter().map(|b| b.x).collect();
        out.push(trace.hidden_final);
        Ok(out)
    }

    /// Loss and its exact gradient with respect to every tensor in `params`.
    pub fn forward_grads(&self, params: &ParamSet, batch: &Batch) -> Result<(f64, ParamSet)> {
        let trace = self.run(params, batch)?;
        let logits = self.head_logits(params, &trace)?;
        let mut dlogits = M::zeros(logits.rows(), logits.cols());
        let loss = cross_entropy(&logits, batch, Some(&mut dlogits));

        let mut grads = params.zeros_like();
        let head = params.tensor(&ParamKey::global(Role::Head))?;
        add_grad(&mut grads, ParamKey::global(Role::Head), &dlogits.matmul_tn(&trace.hidden_final)?)?;
        let d_hidden = dlogits.matmul(head)?;
        let g_final = params.tensor(&ParamKey::global(Role::FinalNorm))?;
        let mut dx = rmsnorm_backward(
            &trace.x_last,
            &trace.inv_final,
            g_final,
            &d_hidden,
            grads_mut(&mut grads, ParamKey::global(Role::FinalNorm))?,
        );

        for (l, cache) in trace.blocks.iter().enumerate().rev() {
            dx = self.block_backward(params, l, cache, batch, dx, &mut grads)?;
        }

        let embed_grad = grads_mut(&mut grads, ParamKey::global(Role::Embed))?;
        for (pos, &tok) in batch.tokens().iter().enumerate() {
            let row = embed_grad.row_mut(tok as usize);
            for (g, &d) in row.iter_mut().zip(dx.row(pos)) {
                *g += d;
            }
        }
        Ok((loss, grads))
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.seq_len() > self.cfg.max_seq_len {
            return Err(Error::Shape(format!(
                "sequence length {} exceeds max_seq_len {}",
                batch.seq_len(),
                self.cfg.max_seq_len
            )));
        }
        if let Some(&t) = batch.tokens().iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::InvalidInput(format!("token id {t} ≥ vocab_size {}", self.cfg.vocab_size)));
        }
        Ok(())
    }

    fn run(&self, params: &ParamSet, batch: &Batch) -> Result<Trace> {
        self.check_batch(batch)?;
        let d = self.cfg.d_model;
        let embed = params.tensor(&ParamKey::global(Role::Embed))?;
        if embed.shape() != (self.cfg.vocab_size, d) {
            return Err(Error::Shape(format!("embedding has shape {:?}", embed.shape())));
        }
        let mut data = Vec::with_capacity(batch.tokens().len() * d);
        for &t in batch.tokens() {
            data.extend_from_slice(embed.row(t as usize));
        }
        let mut x = M::from_vec_unchecked(batch.tokens().len(), d, data);
        ensure_finite(&x, "embed")?;

        let mut blocks = Vec::with_capacity(self.cfg.n_layers);
        for l in 0..self.cfg.n_layers {
            let (x_out, cache) = self.block_forward(params, l, batch, x)?;
            ensure_finite(&x_out, &format!("layers.{l}"))?;
            blocks.push(cache);
            x = x_out;
        }
        let g_final = params.tensor(&ParamKey::global(Role::FinalNorm))?;
        let (hidden_final, inv_final) = rmsnorm(&x, g_final, self.cfg.norm_eps)?;
        ensure_finite(&hidden_final, "final_norm")?;
        Ok(Trace { blocks, x_last: x, inv_final, hidden_final })
    }

    fn head_logits(&self, params: &ParamSet, trace: &Trace) -> Result<M> {
        let head = params.tensor(&ParamKey::global(Role::Head))?;
        let logits = trace.hidden_final.matmul_nt(head)?;
        ensure_finite(&logits, "head")?;
        Ok(logits)
    }

    fn block_forward(&self, p: &ParamSet, l: usize, batch: &Batch, x: M) -> Result<(M, BlockCache)> {
        let eps = self.cfg.norm_eps;
        let g1 = p.tensor(&ParamKey::layer(l, Role::AttnNorm, Part::Weight))?;
        let (xn1, inv1) = rmsnorm(&x, g1, eps)?;
        let (mut q, q_aux) = self.linear_forward(p, l, Role::Wq, &xn1)?;
        let (mut k, k_aux) = self.linear_forward(p, l, Role::Wk, &xn1)?;
        let (v, v_aux) = self.linear_forward(p, l, Role::Wv, &xn1)?;
        self.rotate(&mut q, batch.seq_len(), false);
        self.rotate(&mut k, batch.seq_len(), false);
        let (att, probs) = self.attention(&q, &k, &v, batch);
        let (o, o_aux) = self.linear_forward(p, l, Role::Wo, &att)?;
        let x_mid = x.add(&o)?;

        let g2 = p.tensor(&ParamKey::layer(l, Role::MlpNorm, Part::Weight))?;
        let (xn2, inv2) = rmsnorm(&x_mid, g2, eps)?;
        let (gate, gate_aux) = self.linear_forward(p, l, Role::Wgate, &xn2)?;
        let (up, up_aux) = self.linear_forward(p, l, Role::Wup, &xn2)?;
        let act = M::from_vec_unchecked(
            gate.rows(),
            gate.cols(),
            gate.as_slice().iter().zip(up.as_slice()).map(|(&g, &u)| silu(g) * u).collect(),
        );
        let (down, down_aux) = self.linear_forward(p, l, Role::Wdown, &act)?;
        let x_out = x_mid.add(&down)?;
        let cache = BlockCache {
            x,
            inv1,
            xn1,
            q_aux,
            k_aux,
            v_aux,
            q,
            k,
            v,
            probs,
            att,
            o_aux,
            x_mid,
            inv2,
            xn2,
            gate_aux,
            up_aux,
            gate,
            up,
            act,
            down_aux,
        };
        Ok((x_out, cache))
    }

    fn block_backward(
        &self,
        p: &ParamSet,
        l: usize,
        c: &BlockCache,
        batch: &Batch,
        dx_out: M,
        grads: &mut ParamSet,
    ) -> Result<M> {
        let d_act = self.linear_backward(p, l, Role::Wdown, &c.act, &c.down_aux, &dx_out, grads)?;
        let n = d_act.len();
        let (mut d_gate, mut d_up) = (vec![0.0; n], vec![0.0; n]);
        for i in 0..n {
            let (g, u, da) = (c.gate.as_slice()[i], c.up.as_slice()[i], d_act.as_slice()[i]);
            d_gate[i] = da * u * silu_grad(g);
            d_up[i] = da * silu(g);
        }
        let (rows, cols) = d_act.shape();
        let d_gate = M::from_vec_unchecked(rows, cols, d_gate);
        let d_up = M::from_vec_unchecked(rows, cols, d_up);
        let mut d_xn2 = self.linear_backward(p, l, Role::Wgate, &c.xn2, &c.gate_aux, &d_gate, grads)?;
        d_xn2.axpy(1.0, &self.linear_backward(p, l, Role::Wup, &c.xn2, &c.up_aux, &d_up, grads)?)?;

        let g2 = p.tensor(&ParamKey::layer(l, Role::MlpNorm, Part::Weight))?;
        let mut d_mid = dx_out;
        let dn2 = rmsnorm_backward(
            &c.x_mid,
            &c.inv2,
            g2,
            &d_xn2,
            grads_mut(grads, ParamKey::layer(l, Role::MlpNorm, Part::Weight))?,
        );
        d_mid.axpy(1.0, &dn2)?;

        let d_att = self.linear_backward(p, l, Role::Wo, &c.att, &c.o_aux, &d_mid, grads)?;
        let (mut dq, mut dk, dv) = self.attention_backward(&c.q, &c.k, &c.v, &c.probs, &d_att, batch);
        self.rotate(&mut dq, batch.seq_len(), true);
        self.rotate(&mut dk, batch.seq_len(), true);
        let mut d_xn1 = self.linear_backward(p, l, Role::Wq, &c.xn1, &c.q_aux, &dq, grads)?;
        d_xn1.axpy(1.0, &self.linear_backward(p, l, Role::Wk, &c.xn1, &c.k_aux, &dk, grads)?)?;
        d_xn1.axpy(1.0, &self.linear_backward(p, l, Role::Wv, &c.xn1, &c.v_aux, &dv, grads)?)?;

        let g1 = p.tensor(&ParamKey::layer(l, Role::AttnNorm, Part::Weight))?;
        let dn1 = rmsnorm_backward(
            &c.x,
            &c.inv1,
            g1,
            &d_xn1,
            grads_mut(grads, ParamKey::layer(l, Role::AttnNorm, Part::Weight))?,
        );
        d_mid.axpy(1.0, &dn1)?;
        Ok(d_mid)
    }

    fn cola_act(&self, z: f64) -> f64 {
        match self.cfg.cola_activation {
            ColaActivation::Silu => silu(z),
            ColaActivation::Identity => z,
        }
    }

    fn cola_act_grad(&self, z: f64) -> f64 {
        match self.cfg.cola_activation {
            ColaActivation::Silu => silu_grad(z),
            ColaActivation::Identity => 1.0,
        }
    }

    /// `B·A + mask ⊙ S` for an SLTrain projection.
    pub(crate) fn sltrain_weight(&self, p: &ParamSet, l: usize, role: Role) -> Result<M> {
        let key = |part| ParamKey::layer(l, role, part);
        let a = p.tensor(&key(Part::A))?;
        let b = p.tensor(&key(Part::B))?;
        let s = p.tensor(&key(Part::Sparse))?;
        let mask = self
            .sparse_mask(l, role)
            .ok_or_else(|| Error::Schema(format!("no sparse support for layer {l} {}", role.name())))?;
        let mut w = b.matmul(a)?;
        if w.shape() != s.shape() {
            return Err(Error::Shape(format!("sparse component of {} has shape {:?}", key(Part::Sparse), s.shape())));
        }
        for ((wi, &si), &keep) in w.as_mut_slice().iter_mut().zip(s.as_slice()).zip(mask) {
            if keep {
                *wi += si;
            }
        }
        Ok(w)
    }

    fn linear_forward(&self, p: &ParamSet, l: usize, role: Role, x: &M) -> Result<(M, LinAux)> {
        let key = |part| ParamKey::layer(l, role, part);
        match self.cfg.layer_kind {
            LayerKind::Dense => Ok((x.matmul_nt(p.tensor(&key(Part::Weight))?)?, LinAux::Dense)),
            LayerKind::Adapter => {
                let u = x.matmul_nt(p.tensor(&key(Part::A))?)?;
                let mut y = x.matmul_nt(p.tensor(&key(Part::Weight))?)?;
                y.axpy(1.0, &u.matmul_nt(p.tensor(&key(Part::B))?)?)?;
                Ok((y, LinAux::Adapter { u }))
            }
            LayerKind::Cola => {
                let z = x.matmul_nt(p.tensor(&key(Part::A))?)?;
                let h = z.map(|v| self.cola_act(v));
                let y = h.matmul_nt(p.tensor(&key(Part::B))?)?;
                Ok((y, LinAux::Cola { z, h }))
            }
            LayerKind::Sltrain => {
                let w = self.sltrain_weight(p, l, role)?;
                Ok((x.matmul_nt(&w)?, LinAux::Sltrain { w }))
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn linear_backward(
        &self,
        p: &ParamSet,
        l: usize,
        role: Role,
        x: &M,
        aux: &LinAux,
        dy: &M,
        grads: &mut ParamSet,
    ) -> Result<M> {
        let key = |part| ParamKey::layer(l, role, part);
        match aux {
            LinAux::Dense => {
                let w = p.tensor(&key(Part::Weight))?;
                add_grad(grads, key(Part::Weight), &dy.matmul_tn(x)?)?;
                dy.matmul(w)
            }
            LinAux::Adapter { u } => {
                let w = p.tensor(&key(Part::Weight))?;
                let a = p.tensor(&key(Part::A))?;
                let b = p.tensor(&key(Part::B))?;
                add_grad(grads, key(Part::Weight), &dy.matmul_tn(x)?)?;
                add_grad(grads, key(Part::B), &dy.matmul_tn(u)?)?;
                let du = dy.matmul(b)?;
                add_grad(grads, key(Part::A), &du.matmul_tn(x)?)?;
                let mut dx = dy.matmul(w)?;
                dx.axpy(1.0, &du.matmul(a)?)?;
                Ok(dx)
            }
            LinAux::Cola { z, h } => {
                let a = p.tensor(&key(Part::A))?;
                let b = p.tensor(&key(Part::B))?;
                add_grad(grads, key(Part::B), &dy.matmul_tn(h)?)?;
                let dh = dy.matmul(b)?;
                let dz = M::from_vec_unchecked(
                    dh.rows(),
                    dh.cols(),
                    dh.as_slice().iter().zip(z.as_slice()).map(|(&g, &zz)| g * self.cola_act_grad(zz)).collect(),
                );
                add_grad(grads, key(Part::A), &dz.matmul_tn(x)?)?;
                dz.matmul(a)
            }
            LinAux::Sltrain { w } => {
                let a = p.tensor(&key(Part::A))?;
                let b = p.tensor(&key(Part::B))?;
                let dw = dy.matmul_tn(x)?;
                add_grad(grads, key(Part::B), &dw.matmul_nt(a)?)?;
                add_grad(grads, key(Part::A), &b.matmul_tn(&dw)?)?;
                let mask = self.sparse_mask(l, role).expect("mask exists for sltrain layer");
                let ds = M::from_vec_unchecked(
                    dw.rows(),
                    dw.cols(),
                    dw.as_slice().iter().zip(mask).map(|(&g, &keep)| if keep { g } else { 0.0 }).collect(),
                );
                add_grad(grads, key(Part::Sparse), &ds)?;
                dy.matmul(w)
            }
        }
    }

    /// Applies (or with `inverse`, undoes) the rotary rotation to every head of every row.
    fn rotate(&self, m: &mut M, seq_len: usize, inverse: bool) {
        let hd = self.cfg.head_dim();
        let half = hd / 2;
        let heads = self.cfg.n_heads;
        let sign = if inverse { -1.0 } else { 1.0 };
        for r in 0..m.rows() {
            let t = r % seq_len;
            let cos = &self.rope_cos[t * half..(t + 1) * half];
            let sin = &self.rope_sin[t * half..(t + 1) * half];
            let row = m.row_mut(r);
            for h in 0..heads {
                for i in 0..half {
                    let j = h * hd + 2 * i;
                    let (x0, x1) = (row[j], row[j + 1]);
                    let (c, s) = (cos[i], sign * sin[i]);
                    row[j] = x0 * c - x1 * s;
                    row[j + 1] = x0 * s + x1 * c;
                }
            }
        }
    }

    fn attention(&self, q: &M, k: &M, v: &M, batch: &Batch) -> (M, Vec<f64>) {
        let (t_len, hd, heads) = (batch.seq_len(), self.cfg.head_dim(), self.cfg.n_heads);
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = M::zeros(q.rows(), q.cols());
        let mut probs = vec![0.0; batch.rows() * heads * t_len * t_len];
        let mut scores = vec![0.0; t_len];
        for b in 0..batch.rows() {
            for h in 0..heads {
                let cols = h * hd..(h + 1) * hd;
                let base = (b * heads + h) * t_len * t_len;
                for t in 0..t_len {
                    let qt = &q.row(b * t_len + t)[cols.clone()];
                    let mut max = f64::NEG_INFINITY;
                    for (s, sc) in scores.iter_mut().enumerate().take(t + 1) {
                        *sc = dot(qt, &k.row(b * t_len + s)[cols.clone()]) * scale;
                        max = max.max(*sc);
                    }
                    let mut z = 0.0;
                    for sc in scores.iter_mut().take(t + 1) {
                        *sc = (*sc - max).exp();
                        z += *sc;
                    }
                    let prow = &mut probs[base + t * t_len..base + (t + 1) * t_len];
                    let orow = &mut out.row_mut(b * t_len + t)[cols.clone()];
                    for s in 0..=t {
                        let pv = scores[s] / z;
                        prow[s] = pv;
                        for (o, &vv) in orow.iter_mut().zip(&v.row(b * t_len + s)[cols.clone()]) {
                            *o += pv * vv;
                        }
                    }
                }
            }
        }
        (out, probs)
    }

    fn attention_backward(&self, q: &M, k: &M, v: &M, probs: &[f64], d_out: &M, batch: &Batch) -> (M, M, M) {
        let (t_len, hd, heads) = (batch.seq_len(), self.cfg.head_dim(), self.cfg.n_heads);
        let scale = 1.0 / (hd as f64).sqrt();
        let mut dq = M::zeros(q.rows(), q.cols());
        let mut dk = M::zeros(k.rows(), k.cols());
        let mut dv = M::zeros(v.rows(), v.cols());
        let mut dp = vec![0.0; t_len];
        for b in 0..batch.rows() {
            for h in 0..heads {
                let cols = h * hd..(h + 1) * hd;
                let base = (b * heads + h) * t_len * t_len;
                for t in 0..t_len {
                    let prow = &probs[base + t * t_len..base + (t + 1) * t_len];
                    let dot_row = &d_out.row(b * t_len + t)[cols.clone()];
                    let mut weighted = 0.0;
                    for s in 0..=t {
                        dp[s] = dot(dot_row, &v.row(b * t_len + s)[cols.clone()]);
                        weighted += prow[s] * dp[s];
                        let dvs = &mut dv.row_mut(b * t_len + s)[cols.clone()];
                        for (g, &d) in dvs.iter_mut().zip(dot_row) {
                            *g += prow[s] * d;
                        }
                    }
                    for s in 0..=t {
                        let ds = prow[s] * (dp[s] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        {
                            let ks = &k.row(b * t_len + s)[cols.clone()];
                            let dqt = &mut dq.row_mut(b * t_len + t)[cols.clone()];
                            for (g, &kk) in dqt.iter_mut().zip(ks) {
                                *g += ds * kk;
                            }
                        }
                        let qt = &q.row(b * t_len + t)[cols.clone()];
                        let dks = &mut dk.row_mut(b * t_len + s)[cols.clone()];
                        for (g, &qq) in dks.iter_mut().zip(qt) {
                            *g += ds * qq;
                        }
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

/// Random fixed support per SLTrain projection, drawn once from the model seed.
fn sparse_supports(cfg: &ModelConfig) -> BTreeMap<(usize, Role), Vec<bool>> {
    let root = SeededRng::new(cfg.seed);
    let mut out = BTreeMap::new();
    for l in 0..cfg.n_layers {
        for role in Role::PROJECTIONS {
            let (o, i) = role.projection_dims(cfg).expect("projection");
            let total = o * i;
            let keep = ((cfg.sltrain_density * total as f64).round() as usize).clamp(1, total);
            let mut rng = root.child_named(&format!("{}@support", ParamKey::layer(l, role, Part::Sparse)));
            let mut mask = vec![false; total];
            for idx in index::sample(&mut rng, total, keep) {
                mask[idx] = true;
            }
            out.insert((l, role), mask);
        }
    }
    out
}

fn rmsnorm(x: &M, gain: &M, eps: f64) -> Result<(M, Vec<f64>)> {
    if gain.len() != x.cols() {
        return Err(Error::Shape(format!("norm gain of length {} for width {}", gain.len(), x.cols())));
    }
    let d = x.cols() as f64;
    let g = gain.as_slice();
    let mut out = M::zeros(x.rows(), x.cols());
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let ms = dot(row, row) / d;
        let iv = 1.0 / (ms + eps).sqrt();
        inv.push(iv);
        for ((o, &xv), &gv) in out.row_mut(r).iter_mut().zip(row).zip(g) {
            *o = xv * iv * gv;
        }
    }
    Ok((out, inv))
}

fn rmsnorm_backward(x: &M, inv: &[f64], gain: &M, dy: &M, dgain: &mut M) -> M {
    let d = x.cols() as f64;
    let g = gain.as_slice();
    let mut dx = M::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let (xr, dyr, iv) = (x.row(r), dy.row(r), inv[r]);
        let mut acc = 0.0;
        for j in 0..xr.len() {
            acc += g[j] * dyr[j] * xr[j];
        }
        let coef = acc * iv * iv * iv / d;
        let dg = dgain.as_mut_slice();
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = g[j] * dyr[j] * iv - xr[j] * coef;
            dg[j] += dyr[j] * xr[j] * iv;
        }
    }
    dx
}

/// Mean cross-entropy of next-token prediction; optionally writes `∂loss/∂logits`.
fn cross_entropy(logits: &M, batch: &Batch, mut grad: Option<&mut M>) -> f64 {
    let t_len = batch.seq_len();
    let count = batch.num_targets() as f64;
    let tokens = batch.tokens();
    let mut total = 0.0;
    for r in 0..logits.rows() {
        if r % t_len == t_len - 1 {
            continue;
        }
        let target = tokens[r + 1] as usize;
        let row = logits.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let z: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + z.ln();
        total += lse - row[target];
        if let Some(g) = grad.as_deref_mut() {
            let grow = g.row_mut(r);
            for (gv, &v) in grow.iter_mut().zip(row) {
                *gv = (v - lse).exp() / count;
            }
            grow[target] -= 1.0 / count;
        }
    }
    total / count
}

fn ensure_finite(m: &M, layer: &str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical { layer: layer.to_string() })
    }
}

fn grads_mut(grads: &mut ParamSet, key: ParamKey) -> Result<&mut M> {
    grads.get_mut(&key).ok_or_else(|| Error::Schema(format!("missing tensor `{key}`")))
}

fn add_grad(grads: &mut ParamSet, key: ParamKey, g: &M) -> Result<()> {
    grads_mut(grads, key)?.axpy(1.0, g)
}
