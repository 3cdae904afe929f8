//! Forward and reverse passes of the pre-LayerNorm decoder.
//!
//! ```text
//! x0   = tok_emb[token] + pos_emb[position]
//! a    = LN1(x);  q, k, v = a W_qkv + b_qkv
//! x'   = x + softmax_causal(q k^T / sqrt(d_head)) v W_o + b_o      (per head)
//! x''  = x' + gelu(LN2(x') W_fc + b_fc) W_proj + b_proj
//! out  = LNf(x_L) E^T          (tied)   or   LNf(x_L) W_out
//! ```

use super::{BlockLayout, Gradients, PolicyParams};
use crate::error::{Error, Result};
use crate::math::{add_assign, matmul, matmul_at, matmul_bt};
use crate::vocab::TokenId;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    ln1_out: Vec<f64>,
    ln1: LnCache,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    att_cat: Vec<f64>,
    ln2_out: Vec<f64>,
    ln2: LnCache,
    fc_pre: Vec<f64>,
    fc_act: Vec<f64>,
}

/// Everything the reverse pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    tokens: Vec<usize>,
    blocks: Vec<BlockCache>,
    lnf_out: Vec<f64>,
    lnf: LnCache,
    logit_start: usize,
    logits: Vec<f64>,
}

impl Trace {
    /// Runs the network on `tokens`, producing logits for rows
    /// `logit_start..tokens.len()`.
    pub fn run(params: &PolicyParams, tokens: &[TokenId], logit_start: usize) -> Result<Self> {
        let cfg = params.config();
        let (d, v, f) = (cfg.d_model, cfg.vocab_size, cfg.d_ff);
        let t = tokens.len();
        if t > cfg.context_window {
            return Err(Error::ContextOverflow {
                len: t,
                window: cfg.context_window,
                turn: None,
            });
        }
        if t == 0 || logit_start >= t {
            return Err(Error::Format("forward pass needs a nonempty row range".into()));
        }
        let ids: Vec<usize> = tokens.iter().map(|x| x.index()).collect();
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidId {
                id: bad as u32,
                vocab_size: v,
            });
        }
        let p = params.as_slice();
        let layout = params.layout();

        let mut x = vec![0.0; t * d];
        for (i, &id) in ids.iter().enumerate() {
            let row = &mut x[i * d..(i + 1) * d];
            row.copy_from_slice(&p[layout.tok_emb + id * d..layout.tok_emb + (id + 1) * d]);
            add_assign(row, &p[layout.pos_emb + i * d..layout.pos_emb + (i + 1) * d]);
        }

        let mut blocks = Vec::with_capacity(layout.blocks.len());
        for bl in &layout.blocks {
            let (ln1_out, ln1) = layer_norm(&x, t, d, &p[bl.ln1_g..], &p[bl.ln1_b..]);
            let mut qkv = vec![0.0; t * 3 * d];
            matmul(t, d, 3 * d, &ln1_out, &p[bl.w_qkv..], &mut qkv, 0.0);
            add_bias(&mut qkv, &p[bl.b_qkv..bl.b_qkv + 3 * d]);

            let (att_cat, probs) = attention(&qkv, t, d, cfg.n_heads);
            matmul(t, d, d, &att_cat, &p[bl.w_o..], &mut x, 1.0);
            add_bias(&mut x, &p[bl.b_o..bl.b_o + d]);

            let (ln2_out, ln2) = layer_norm(&x, t, d, &p[bl.ln2_g..], &p[bl.ln2_b..]);
            let mut fc_pre = vec![0.0; t * f];
            matmul(t, d, f, &ln2_out, &p[bl.w_fc..], &mut fc_pre, 0.0);
            add_bias(&mut fc_pre, &p[bl.b_fc..bl.b_fc + f]);
            let fc_act: Vec<f64> = fc_pre.iter().map(|&u| gelu(u)).collect();
            matmul(t, f, d, &fc_act, &p[bl.w_proj..], &mut x, 1.0);
            add_bias(&mut x, &p[bl.b_proj..bl.b_proj + d]);

            blocks.push(BlockCache {
                ln1_out,
                ln1,
                qkv,
                probs,
                att_cat,
                ln2_out,
                ln2,
                fc_pre,
                fc_act,
            });
        }

        let (lnf_out, lnf) = layer_norm(&x, t, d, &p[layout.lnf_g..], &p[layout.lnf_b..]);
        let rows = t - logit_start;
        let mut logits = vec![0.0; rows * v];
        let tail = &lnf_out[logit_start * d..];
        match layout.w_out {
            None => matmul_bt(rows, d, v, tail, &p[layout.tok_emb..], &mut logits, 0.0),
            Some(w) => matmul(rows, d, v, tail, &p[w..], &mut logits, 0.0),
        }

        Ok(Self {
            tokens: ids,
            blocks,
            lnf_out,
            lnf,
            logit_start,
            logits,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn logit_start(&self) -> usize {
        self.logit_start
    }

    /// Logits of absolute position `pos` (must be `>= logit_start`).
    pub fn logits_at(&self, pos: usize) -> &[f64] {
        let v = self.logits.len() / (self.tokens.len() - self.logit_start);
        let r = pos - self.logit_start;
        &self.logits[r * v..(r + 1) * v]
    }

    /// Accumulates `d loss / d params` into `grads`, given `d loss / d logits`
    /// for rows `logit_start..len` laid out like the forward logits.
    pub fn backward(&self, params: &PolicyParams, dlogits: &[f64], grads: &mut Gradients) {
        let cfg = params.config();
        let (d, v, f, h) = (cfg.d_model, cfg.vocab_size, cfg.d_ff, cfg.n_heads);
        let t = self.tokens.len();
        let rows = t - self.logit_start;
        debug_assert_eq!(dlogits.len(), rows * v);
        let p = params.as_slice();
        let layout = params.layout();
        let g = &mut grads.data;

        // Output projection.
        let mut dx_lnf = vec![0.0; t * d];
        let tail = &self.lnf_out[self.logit_start * d..];
        match layout.w_out {
            None => {
                let (e0, e1) = (layout.tok_emb, layout.tok_emb + v * d);
                matmul(rows, v, d, dlogits, &p[e0..e1], &mut dx_lnf[self.logit_start * d..], 0.0);
                matmul_at(v, rows, d, dlogits, tail, &mut g[e0..e1], 1.0);
            }
            Some(w) => {
                matmul_bt(rows, v, d, dlogits, &p[w..w + d * v], &mut dx_lnf[self.logit_start * d..], 0.0);
                matmul_at(d, rows, v, tail, dlogits, &mut g[w..w + d * v], 1.0);
            }
        }
        let mut dx = vec![0.0; t * d];
        layer_norm_backward(&dx_lnf, &self.lnf, t, d, p, layout.lnf_g, layout.lnf_b, g, &mut dx);

        for (bl, c) in layout.blocks.iter().zip(&self.blocks).rev() {
            block_backward(bl, c, t, d, f, h, p, g, &mut dx);
        }

        for (i, &id) in self.tokens.iter().enumerate() {
            let row = &dx[i * d..(i + 1) * d];
            add_assign(&mut g[layout.tok_emb + id * d..layout.tok_emb + (id + 1) * d], row);
            add_assign(&mut g[layout.pos_emb + i * d..layout.pos_emb + (i + 1) * d], row);
        }
    }
}

/// Per-position logits for every row of `input`.
pub fn forward_logits(params: &PolicyParams, input: &[TokenId]) -> Result<Vec<Vec<f64>>> {
    let trace = Trace::run(params, input, 0)?;
    Ok((0..input.len()).map(|i| trace.logits_at(i).to_vec()).collect())
}

#[allow(clippy::too_many_arguments)]
fn block_backward(
    bl: &BlockLayout,
    c: &BlockCache,
    t: usize,
    d: usize,
    f: usize,
    h: usize,
    p: &[f64],
    g: &mut [f64],
    dx: &mut [f64],
) {
    // Feed-forward branch: x'' = x' + act W_proj + b_proj.
    let mut d_act = vec![0.0; t * f];
    matmul_bt(t, d, f, dx, &p[bl.w_proj..bl.w_proj + f * d], &mut d_act, 0.0);
    matmul_at(f, t, d, &c.fc_act, dx, &mut g[bl.w_proj..bl.w_proj + f * d], 1.0);
    sum_rows(dx, t, d, &mut g[bl.b_proj..bl.b_proj + d]);
    for (da, &u) in d_act.iter_mut().zip(&c.fc_pre) {
        *da *= gelu_grad(u);
    }
    matmul_at(d, t, f, &c.ln2_out, &d_act, &mut g[bl.w_fc..bl.w_fc + d * f], 1.0);
    sum_rows(&d_act, t, f, &mut g[bl.b_fc..bl.b_fc + f]);
    let mut d_ln2 = vec![0.0; t * d];
    matmul_bt(t, f, d, &d_act, &p[bl.w_fc..bl.w_fc + d * f], &mut d_ln2, 0.0);
    layer_norm_backward(&d_ln2, &c.ln2, t, d, p, bl.ln2_g, bl.ln2_b, g, dx);

    // Attention branch: x' = x + att W_o + b_o.
    let mut d_att = vec![0.0; t * d];
    matmul_bt(t, d, d, dx, &p[bl.w_o..bl.w_o + d * d], &mut d_att, 0.0);
    matmul_at(d, t, d, &c.att_cat, dx, &mut g[bl.w_o..bl.w_o + d * d], 1.0);
    sum_rows(dx, t, d, &mut g[bl.b_o..bl.b_o + d]);
    let d_qkv = attention_backward(&c.qkv, &c.probs, &d_att, t, d, h);
    matmul_at(d, t, 3 * d, &c.ln1_out, &d_qkv, &mut g[bl.w_qkv..bl.w_qkv + 3 * d * d], 1.0);
    sum_rows(&d_qkv, t, 3 * d, &mut g[bl.b_qkv..bl.b_qkv + 3 * d]);
    let mut d_ln1 = vec![0.0; t * d];
    matmul_bt(t, 3 * d, d, &d_qkv, &p[bl.w_qkv..bl.w_qkv + 3 * d * d], &mut d_ln1, 0.0);
    layer_norm_backward(&d_ln1, &c.ln1, t, d, p, bl.ln1_g, bl.ln1_b, g, dx);
}

fn add_bias(x: &mut [f64], b: &[f64]) {
    for row in x.chunks_exact_mut(b.len()) {
        add_assign(row, b);
    }
}

fn sum_rows(x: &[f64], _rows: usize, cols: usize, out: &mut [f64]) {
    for row in x.chunks_exact(cols) {
        add_assign(out, row);
    }
}

fn layer_norm(x: &[f64], t: usize, d: usize, gain: &[f64], bias: &[f64]) -> (Vec<f64>, LnCache) {
    let mut out = vec![0.0; t * d];
    let mut xhat = vec![0.0; t * d];
    let mut rstd = vec![0.0; t];
    for i in 0..t {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let xh = (row[j] - mean) * r;
            xhat[i * d + j] = xh;
            out[i * d + j] = gain[j] * xh + bias[j];
        }
    }
    (out, LnCache { xhat, rstd })
}

/// Adds `d loss / d x` for `y = LN(x)` into `dx`, and the gain/bias
/// gradients into `g`.
#[allow(clippy::too_many_arguments)]
fn layer_norm_backward(
    dy: &[f64],
    c: &LnCache,
    t: usize,
    d: usize,
    p: &[f64],
    gain_off: usize,
    bias_off: usize,
    g: &mut [f64],
    dx: &mut [f64],
) {
    let gain = &p[gain_off..gain_off + d];
    let mut dxhat = vec![0.0; d];
    for i in 0..t {
        let dyr = &dy[i * d..(i + 1) * d];
        let xh = &c.xhat[i * d..(i + 1) * d];
        for j in 0..d {
            g[gain_off + j] += dyr[j] * xh[j];
            g[bias_off + j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let r = c.rstd[i];
        for j in 0..d {
            dx[i * d + j] += r * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
}

fn attention(qkv: &[f64], t: usize, d: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    let dh = d / h;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; t * d];
    let mut probs = vec![0.0; h * t * t];
    for head in 0..h {
        let (qo, ko, vo) = (head * dh, d + head * dh, 2 * d + head * dh);
        for i in 0..t {
            let q = &qkv[i * 3 * d + qo..i * 3 * d + qo + dh];
            let row = &mut probs[(head * t + i) * t..(head * t + i) * t + i + 1];
            let mut max = f64::NEG_INFINITY;
            for (j, s) in row.iter_mut().enumerate() {
                let k = &qkv[j * 3 * d + ko..j * 3 * d + ko + dh];
                *s = scale * q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>();
                max = max.max(*s);
            }
            let mut z = 0.0;
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                z += *s;
            }
            let o = &mut out[i * d + head * dh..i * d + head * dh + dh];
            for (j, s) in row.iter_mut().enumerate() {
                *s /= z;
                let vj = &qkv[j * 3 * d + vo..j * 3 * d + vo + dh];
                for (oo, &vv) in o.iter_mut().zip(vj) {
                    *oo += *s * vv;
                }
            }
        }
    }
    (out, probs)
}

fn attention_backward(qkv: &[f64], probs: &[f64], d_out: &[f64], t: usize, d: usize, h: usize) -> Vec<f64> {
    let dh = d / h;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut d_qkv = vec![0.0; t * 3 * d];
    let mut dp = vec![0.0; t];
    for head in 0..h {
        let (qo, ko, vo) = (head * dh, d + head * dh, 2 * d + head * dh);
        for i in 0..t {
            let doi = &d_out[i * d + head * dh..i * d + head * dh + dh];
            let pr = &probs[(head * t + i) * t..(head * t + i) * t + i + 1];
            let mut dot = 0.0;
            for j in 0..=i {
                let vj = &qkv[j * 3 * d + vo..j * 3 * d + vo + dh];
                dp[j] = doi.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>();
                dot += pr[j] * dp[j];
                let dv = &mut d_qkv[j * 3 * d + vo..j * 3 * d + vo + dh];
                for (x, &y) in dv.iter_mut().zip(doi) {
                    *x += pr[j] * y;
                }
            }
            for j in 0..=i {
                let ds = pr[j] * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                for e in 0..dh {
                    let qi = qkv[i * 3 * d + qo + e];
                    let kj = qkv[j * 3 * d + ko + e];
                    d_qkv[i * 3 * d + qo + e] += ds * kj;
                    d_qkv[j * 3 * d + ko + e] += ds * qi;
                }
            }
        }
    }
    d_qkv
}

#[inline]
fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

#[inline]
fn gelu_grad(u: f64) -> f64 {
    let th = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}
