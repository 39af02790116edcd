//! Bidirectional cross-view attention with learnable fusion scales.
//!
//! Tokens are the spatial positions of one frame, channels are the
//! embedding. With row-vector tokens and `X̃ = LN(X)`:
//!
//! ```text
//! M_L = α_L · Attn(X̃_L W1_L, X̃_R W1_R, X_R W2_R) + X_L
//! M_R = α_R · Attn(X̃_R W1_R, X̃_L W1_L, X_L W2_L) + X_R
//! ```
//!
//! The values come from the un-normalized maps.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{uniform, LayerNorm};
use crate::params::{ParamId, ParamKind, ParamStore, Session};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug)]
pub struct AcviParams {
    pub w1_l: ParamId,
    pub w1_r: ParamId,
    pub w2_l: ParamId,
    pub w2_r: ParamId,
    pub ln_l: LayerNorm,
    /// Equal to `ln_l` when the norm is shared between views.
    pub ln_r: LayerNorm,
    pub alpha_l: ParamId,
    pub alpha_r: ParamId,
    pub channels: usize,
}

impl AcviParams {
    pub fn new<S: Float>(
        store: &mut ParamStore<S>,
        name: &str,
        channels: usize,
        shared_layer_norm: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (channels as f64).sqrt();
        let mut proj = |suffix: &str| {
            store.add(
                format!("{name}.{suffix}"),
                uniform(&[channels, channels], bound, rng),
                ParamKind::Weight,
            )
        };
        let (w1_l, w1_r, w2_l, w2_r) = (proj("w1_l")?, proj("w1_r")?, proj("w2_l")?, proj("w2_r")?);
        let (ln_l, ln_r) = if shared_layer_norm {
            let ln = LayerNorm::new(store, &format!("{name}.ln"), channels)?;
            (ln.clone(), ln)
        } else {
            (
                LayerNorm::new(store, &format!("{name}.ln_l"), channels)?,
                LayerNorm::new(store, &format!("{name}.ln_r"), channels)?,
            )
        };
        let alpha_l = store.add(format!("{name}.alpha_l"), Tensor::zeros(vec![1]), ParamKind::Weight)?;
        let alpha_r = store.add(format!("{name}.alpha_r"), Tensor::zeros(vec![1]), ParamKind::Weight)?;
        Ok(Self {
            w1_l,
            w1_r,
            w2_l,
            w2_r,
            ln_l,
            ln_r,
            alpha_l,
            alpha_r,
            channels,
        })
    }

    /// Trainable scalars one module adds: four projections, the norms and
    /// two scales.
    pub fn expected_count(channels: usize, shared_layer_norm: bool) -> usize {
        let norms = if shared_layer_norm { 1 } else { 2 };
        4 * channels * channels + norms * 2 * channels + 2
    }
}

/// `softmax(QKᵀ/√C)·V` over `[G, N, C]` token batches. Returns the output and
/// the `[G, N, N]` attention weights.
pub fn attention<S: Float>(tape: &mut Tape<S>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (sq, sk, sv) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if sq.len() != 3 || sk != sv || sq[0] != sk[0] || sq[2] != sk[2] {
        return Err(Error::dim(
            "attention",
            format!("incompatible q {sq:?}, k {sk:?}, v {sv:?}"),
        ));
    }
    let kt = tape.transpose_last2(k)?;
    let logits = tape.bmm(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (sq[2] as f64).sqrt())?;
    let weights = tape.softmax_lastdim(logits)?;
    let out = tape.bmm(weights, v)?;
    Ok((out, weights))
}

/// Single-batch attention on plain `[N, C]` tensors.
pub fn scaled_dot_attention<S: Float>(q: &Tensor<S>, k: &Tensor<S>, v: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
    for (name, t) in [("q", q), ("k", k), ("v", v)] {
        if t.rank() != 2 {
            return Err(Error::dim("attention", format!("{name} has shape {:?}, need [N, C]", t.shape())));
        }
    }
    let mut tape = Tape::new();
    let lift = |tape: &mut Tape<S>, t: &Tensor<S>| -> Result<Var> {
        let c = tape.constant(t.clone());
        let mut s = vec![1];
        s.extend_from_slice(t.shape());
        tape.reshape(c, s)
    };
    let (qv, kv, vv) = (lift(&mut tape, q)?, lift(&mut tape, k)?, lift(&mut tape, v)?);
    let (out, w) = attention(&mut tape, qv, kv, vv)?;
    let out = tape.value(out).clone().reshape(vec![q.shape()[0], v.shape()[1]])?;
    let w = tape.value(w).clone().reshape(vec![q.shape()[0], k.shape()[0]])?;
    Ok((out, w))
}

/// `[G, C, H, W]` maps to `[G·H·W, C]` token rows.
fn to_tokens<S: Float>(tape: &mut Tape<S>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let t = tape.permute(x, &[0, 2, 3, 1])?;
    tape.reshape(t, vec![s[0] * s[2] * s[3], s[1]])
}

fn from_tokens<S: Float>(tape: &mut Tape<S>, t: Var, shape: &[usize]) -> Result<Var> {
    let t = tape.reshape(t, vec![shape[0], shape[2], shape[3], shape[1]])?;
    tape.permute(t, &[0, 3, 1, 2])
}

/// Both fused maps `(M_L, M_R)` for views of shape `[G, C, H, W]`.
pub fn cross_view_interact<S: Float>(sess: &mut Session<'_, S>, xl: Var, xr: Var, p: &AcviParams) -> Result<(Var, Var)> {
    let shape = sess.tape.shape(xl).to_vec();
    if shape != sess.tape.shape(xr) {
        return Err(Error::dim(
            "cross_view_interact",
            format!("views {shape:?} and {:?} differ", sess.tape.shape(xr)),
        ));
    }
    if shape.len() != 4 || shape[1] != p.channels {
        return Err(Error::dim(
            "cross_view_interact",
            format!("need [G, {}, H, W], got {shape:?}", p.channels),
        ));
    }
    let (g, n, c) = (shape[0], shape[2] * shape[3], shape[1]);
    let tl = to_tokens(&mut sess.tape, xl)?;
    let tr = to_tokens(&mut sess.tape, xr)?;
    let nl = p.ln_l.forward(sess, tl)?;
    let nr = p.ln_r.forward(sess, tr)?;

    let project = |sess: &mut Session<'_, S>, x: Var, w: ParamId| -> Result<Var> {
        let w = sess.param(w);
        let y = sess.tape.matmul(x, w)?;
        sess.tape.reshape(y, vec![g, n, c])
    };
    let ql = project(sess, nl, p.w1_l)?;
    let qr = project(sess, nr, p.w1_r)?;
    let vl = project(sess, tl, p.w2_l)?;
    let vr = project(sess, tr, p.w2_r)?;

    let (r_to_l, _) = attention(&mut sess.tape, ql, qr, vr)?;
    let (l_to_r, _) = attention(&mut sess.tape, qr, ql, vl)?;

    let fuse = |sess: &mut Session<'_, S>, m: Var, alpha: ParamId, skip: Var| -> Result<Var> {
        let m = from_tokens(&mut sess.tape, m, &shape)?;
        let a = sess.param(alpha);
        let m = sess.tape.scale_by(m, a)?;
        sess.tape.add(m, skip)
    };
    let ml = fuse(sess, r_to_l, p.alpha_l, xl)?;
    let mr = fuse(sess, l_to_r, p.alpha_r, xr)?;
    Ok((ml, mr))
}
