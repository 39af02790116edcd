//! Redundancy-aware shrinkage: a per-channel threshold predicted from the
//! feature map itself, applied by soft thresholding inside a residual branch.
//!
//! For a map `x` with channels `c`:
//!
//! ```text
//! g_c   = mean(|x_c|)
//! σ     = sigmoid(FC2(relu(FC1(g))))
//! τ_c   = σ_c · g_c
//! y     = sign(x) · max(|x| − τ_c, 0)
//! ```
//!
//! Because `σ ∈ (0, 1)`, each threshold sits strictly between zero and the
//! channel's mean magnitude, so a channel whose peak exceeds its mean can
//! never be zeroed out entirely.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv, Linear, ResidualBlock};
use crate::params::{ParamStore, Session};
use crate::tensor::{Float, Tensor};

pub const DEFAULT_REDUCTION: usize = 4;
pub const MIN_HIDDEN: usize = 4;

/// Two-layer network mapping per-channel mean magnitudes to scaling factors.
#[derive(Clone, Debug)]
pub struct ThresholdSubnet {
    pub fc1: Linear,
    pub fc2: Linear,
    pub channels: usize,
}

/// Per-channel soft thresholds, shape `[C, 1, 1]` or `[N, C]` for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdVector<S = f32> {
    pub tau: Tensor<S>,
}

pub fn hidden_width(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(MIN_HIDDEN)
}

impl ThresholdSubnet {
    pub fn new<S: Float>(
        store: &mut ParamStore<S>,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let hidden = hidden_width(channels, reduction);
        let fc1 = Linear::new(store, &format!("{name}.fc1"), channels, hidden, rng)?;
        let fc2 = Linear::new(store, &format!("{name}.fc2"), hidden, channels, rng)?;
        Ok(Self { fc1, fc2, channels })
    }

    /// Thresholds `[N, C]` for `x` of shape `[N, C, H, W]`, or `[C, 1, 1]`
    /// for a single map `[C, H, W]`.
    pub fn estimate<S: Float>(&self, sess: &mut Session<'_, S>, x: Var) -> Result<Var> {
        let shape = sess.tape.shape(x).to_vec();
        let (n, c) = match shape.len() {
            3 => (1, shape[0]),
            4 => (shape[0], shape[1]),
            _ => return Err(Error::dim("estimate_threshold", format!("need [N, C, H, W], got {shape:?}"))),
        };
        if c != self.channels {
            return Err(Error::dim(
                "estimate_threshold",
                format!("input has {c} channels, subnet expects {}", self.channels),
            ));
        }
        let t = &mut sess.tape;
        let a = t.abs(x)?;
        let pooled = t.global_avg_pool(a)?;
        let mean_abs = t.reshape(pooled, vec![n, c])?;
        let h = self.fc1.forward(sess, mean_abs)?;
        let h = sess.tape.relu(h)?;
        let f = self.fc2.forward(sess, h)?;
        let sigma = sess.tape.sigmoid(f)?;
        let tau = sess.tape.mul(sigma, mean_abs)?;
        if shape.len() == 3 {
            sess.tape.reshape(tau, vec![c, 1, 1])
        } else {
            Ok(tau)
        }
    }

    /// Shrinks `x` by its own estimated thresholds.
    pub fn apply<S: Float>(&self, sess: &mut Session<'_, S>, x: Var) -> Result<Var> {
        let tau = self.estimate(sess, x)?;
        sess.tape.soft_threshold(x, tau)
    }
}

/// Standalone threshold estimate for one feature map.
pub fn estimate_threshold<S: Float>(
    x: &Tensor<S>,
    subnet: &ThresholdSubnet,
    store: &mut ParamStore<S>,
) -> Result<ThresholdVector<S>> {
    if !x.is_finite() {
        return Err(Error::contract("estimate_threshold", "input contains non-finite values"));
    }
    let mut sess = Session::new(store, false, 0);
    let xv = sess.tape.constant(x.clone());
    let tau = subnet.estimate(&mut sess, xv)?;
    Ok(ThresholdVector {
        tau: sess.tape.value(tau).clone(),
    })
}

/// `sign(x)·max(|x| − τ_c, 0)` per channel.
pub fn soft_threshold<S: Float>(x: &Tensor<S>, tau: &ThresholdVector<S>) -> Result<Tensor<S>> {
    let mut tape = crate::autodiff::Tape::new();
    let xv = tape.constant(x.clone());
    let tv = tape.constant(tau.tau.clone());
    let y = tape.soft_threshold(xv, tv)?;
    Ok(tape.value(y).clone())
}

/// Residual block whose branch `conv-bn-relu-conv-bn` is shrunk by an RAO
/// before the skip addition. Without the RAO it is a plain residual branch.
#[derive(Clone, Debug)]
pub struct ShrinkageBlock {
    pub conv1: Conv,
    pub bn1: BatchNorm,
    pub conv2: Conv,
    pub bn2: BatchNorm,
    pub rao: Option<ThresholdSubnet>,
}

impl ShrinkageBlock {
    pub fn new<S: Float>(
        store: &mut ParamStore<S>,
        name: &str,
        channels: usize,
        rao_reduction: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let conv1 = Conv::new(store, &format!("{name}.conv1"), channels, channels, &[3, 3], &[1, 1], &[1, 1], rng)?;
        let bn1 = BatchNorm::new(store, &format!("{name}.bn1"), channels)?;
        let conv2 = Conv::new(store, &format!("{name}.conv2"), channels, channels, &[3, 3], &[1, 1], &[1, 1], rng)?;
        let bn2 = BatchNorm::new(store, &format!("{name}.bn2"), channels)?;
        // The subnet draws from its own stream so that switching it off
        // leaves every other initial weight unchanged.
        let sub_seed: u64 = rng.random();
        let rao = rao_reduction
            .map(|r| {
                let mut sub = ChaCha8Rng::seed_from_u64(sub_seed);
                ThresholdSubnet::new(store, &format!("{name}.rao"), channels, r, &mut sub)
            })
            .transpose()?;
        Ok(Self {
            conv1,
            bn1,
            conv2,
            bn2,
            rao,
        })
    }

    pub fn forward<S: Float>(&self, sess: &mut Session<'_, S>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(sess, x)?;
        let h = self.bn1.forward(sess, h)?;
        let h = sess.tape.relu(h)?;
        let h = self.conv2.forward(sess, h)?;
        let mut h = self.bn2.forward(sess, h)?;
        if let Some(rao) = &self.rao {
            h = rao.apply(sess, h)?;
        }
        sess.tape.add(x, h)
    }
}

/// A plain residual block followed by a shrinkage block.
#[derive(Clone, Debug)]
pub struct DrsBlock {
    pub plain: ResidualBlock,
    pub shrink: ShrinkageBlock,
}

impl DrsBlock {
    pub fn new<S: Float>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rao_reduction: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            plain: ResidualBlock::new(store, &format!("{name}.plain"), c_in, c_out, stride, rng)?,
            shrink: ShrinkageBlock::new(store, &format!("{name}.shrink"), c_out, rao_reduction, rng)?,
        })
    }

    pub fn forward<S: Float>(&self, sess: &mut Session<'_, S>, x: Var) -> Result<Var> {
        let h = self.plain.forward(sess, x)?;
        self.shrink.forward(sess, h)
    }
}
