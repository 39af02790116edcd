//! Left/right half views of a feature map and the weight-shared encoder.
//!
//! The right half is mirrored into the left half's orientation, so a mouth
//! that is symmetric about the vertical centre line yields two identical
//! views. For an odd width both halves keep the centre column.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamStore, Session};
use crate::rao::DrsBlock;
use crate::tensor::{Float, Tensor};

/// Two canonically oriented half views plus what is needed to undo the split.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair<T> {
    pub left: T,
    pub right: T,
    pub mirrored_right: bool,
    pub original_width: usize,
}

impl<T> ViewPair<T> {
    pub fn swap(self) -> Self {
        Self {
            left: self.right,
            right: self.left,
            ..self
        }
    }

    pub fn map<U>(self, mut f: impl FnMut(T) -> Result<U>) -> Result<ViewPair<U>> {
        Ok(ViewPair {
            left: f(self.left)?,
            right: f(self.right)?,
            mirrored_right: self.mirrored_right,
            original_width: self.original_width,
        })
    }
}

pub fn half_width(width: usize) -> usize {
    width.div_ceil(2)
}

/// Splits along the last axis: `left = [0, ⌈W/2⌉)`, `right = flip([W − ⌈W/2⌉, W))`.
pub fn split_var<S: Float>(tape: &mut Tape<S>, x: Var) -> Result<ViewPair<Var>> {
    let shape = tape.shape(x).to_vec();
    let axis = shape
        .len()
        .checked_sub(1)
        .ok_or_else(|| Error::dim("split_views", "scalar input"))?;
    let w = shape[axis];
    if w < 2 {
        return Err(Error::dim("split_views", format!("width {w} < 2 in {shape:?}")));
    }
    let half = half_width(w);
    let left = tape.narrow(x, axis, 0, half)?;
    let right = tape.narrow(x, axis, w - half, half)?;
    let right = tape.flip(right, axis)?;
    Ok(ViewPair {
        left,
        right,
        mirrored_right: true,
        original_width: w,
    })
}

/// Inverse of [`split_var`]; an odd width's centre column becomes the mean
/// of its two copies.
pub fn reassemble_var<S: Float>(tape: &mut Tape<S>, pair: &ViewPair<Var>) -> Result<Var> {
    let ls = tape.shape(pair.left).to_vec();
    if ls != tape.shape(pair.right) {
        return Err(Error::contract(
            "reassemble",
            format!("view shapes {ls:?} and {:?} differ", tape.shape(pair.right)),
        ));
    }
    let axis = ls.len() - 1;
    let half = ls[axis];
    let w = pair.original_width;
    if w < 2 || half != half_width(w) {
        return Err(Error::contract(
            "reassemble",
            format!("views of width {half} cannot come from width {w}"),
        ));
    }
    let right = if pair.mirrored_right {
        tape.flip(pair.right, axis)?
    } else {
        pair.right
    };
    if w % 2 == 0 {
        return tape.concat(&[pair.left, right], axis);
    }
    let mut parts = Vec::with_capacity(3);
    if half > 1 {
        parts.push(tape.narrow(pair.left, axis, 0, half - 1)?);
    }
    let a = tape.narrow(pair.left, axis, half - 1, 1)?;
    let b = tape.narrow(right, axis, 0, 1)?;
    let sum = tape.add(a, b)?;
    parts.push(tape.scale(sum, 0.5)?);
    if half > 1 {
        parts.push(tape.narrow(right, axis, 1, half - 1)?);
    }
    tape.concat(&parts, axis)
}

pub fn split_views<S: Float>(x: &Tensor<S>) -> Result<ViewPair<Tensor<S>>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pair = split_var(&mut tape, xv)?;
    pair.map(|v| Ok(tape.value(v).clone()))
}

pub fn reassemble<S: Float>(pair: &ViewPair<Tensor<S>>) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let vars = ViewPair {
        left: tape.constant(pair.left.clone()),
        right: tape.constant(pair.right.clone()),
        mirrored_right: pair.mirrored_right,
        original_width: pair.original_width,
    };
    let y = reassemble_var(&mut tape, &vars)?;
    Ok(tape.value(y).clone())
}

/// One resolution stage: DRS blocks, the first of which carries the stride.
#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub blocks: Vec<DrsBlock>,
    pub c_out: usize,
}

impl EncoderStage {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Float>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        blocks: usize,
        rao_reduction: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if blocks == 0 {
            return Err(Error::contract("encoder_stage", "a stage needs at least one block"));
        }
        let blocks = (0..blocks)
            .map(|i| {
                let (ci, s) = if i == 0 { (c_in, stride) } else { (c_out, 1) };
                DrsBlock::new(store, &format!("{name}.block{i}"), ci, c_out, s, rao_reduction, rng)
            })
            .collect::<Result<_>>()?;
        Ok(Self { blocks, c_out })
    }

    pub fn forward<S: Float>(&self, sess: &mut Session<'_, S>, mut x: Var) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(sess, x)?;
        }
        Ok(x)
    }

    /// Runs both views through the same parameters, one after the other.
    pub fn forward_pair<S: Float>(&self, sess: &mut Session<'_, S>, pair: ViewPair<Var>) -> Result<ViewPair<Var>> {
        pair.map(|v| self.forward(sess, v))
    }
}

/// Encoder stages whose single parameter set serves both views.
#[derive(Clone, Debug)]
pub struct SharedEncoder {
    pub stages: Vec<EncoderStage>,
}

impl SharedEncoder {
    /// Stage `i` maps `channels[i-1]` (or `c_in`) to `channels[i]`; every
    /// stage after the first halves the resolution.
    pub fn new<S: Float>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        channels: &[usize],
        blocks_per_stage: usize,
        rao_reduction: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut prev = c_in;
        let mut stages = Vec::with_capacity(channels.len());
        for (i, &c) in channels.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            stages.push(EncoderStage::new(
                store,
                &format!("{name}.stage{i}"),
                prev,
                c,
                stride,
                blocks_per_stage,
                rao_reduction,
                rng,
            )?);
            prev = c;
        }
        Ok(Self { stages })
    }
}

/// Every encoder stage applied to both views, with no interaction between them.
pub fn encode_shared<S: Float>(
    sess: &mut Session<'_, S>,
    mut pair: ViewPair<Var>,
    enc: &SharedEncoder,
) -> Result<ViewPair<Var>> {
    for stage in &enc.stages {
        pair = stage.forward_pair(sess, pair)?;
    }
    Ok(pair)
}
