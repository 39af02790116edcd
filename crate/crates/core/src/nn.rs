//! Layers shared by every part of the network.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore, Session};
use crate::tensor::{numel, Float, Tensor};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub(crate) fn uniform<S: Float>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<S> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..numel(shape)).map(|_| S::of(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

/// Kaiming-uniform style bound for a ReLU network.
fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Bias-free convolution over 1, 2 or 3 spatial axes, picked by kernel rank.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub spatial: usize,
}

impl Conv {
    pub fn new<S: Float>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: &[usize],
        stride: &[usize],
        padding: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let spatial = kernel.len();
        if !(1..=3).contains(&spatial) || stride.len() != spatial || padding.len() != spatial {
            return Err(Error::contract("conv", "kernel, stride and padding ranks must agree"));
        }
        let mut shape = vec![c_out, c_in];
        shape.extend_from_slice(kernel);
        let fan_in = c_in * kernel.iter().product::<usize>();
        let weight = store.add(
            format!("{name}.weight"),
            uniform(&shape, he_bound(fan_in), rng),
            ParamKind::Weight,
        )?;
        let mut s = [1; 3];
        let mut p = [0; 3];
        s[3 - spatial..].copy_from_slice(stride);
        p[3 - spatial..].copy_from_slice(padding);
        Ok(Self {
            weight,
            stride: s,
            padding: p,
            spatial,
        })
    }

    pub fn forward<S: Float>(&self, sess: &mut Session<'_, S>, x: Var) -> Result<Var> {
        let k = sess.param(self.weight);
        let t = &mut sess.tape;
        match self.spatial {
            1 => t.conv1d(x, k, self.stride[2], self.padding[2]),
            2 => t.conv2d(x, k, [self.stride[1], self.stride[2]], [self.padding[1], self.padding[2]]),
            _ => t.conv3d(x, k, self.stride, self.padding),
        }
    }
}

/// Batch normalization over channel axis 1 with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<S: Float>(store: &mut ParamStore<S>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(vec![channels]), ParamKind::Norm)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![channels]), ParamKind::Norm)?,
            running_mean: store.add(
                format!("{name}.running_mean"),
                Tensor::zeros(vec![channels]),
                ParamKind::Buffer,
            )?,
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::ones(vec![channels]),
                ParamKind::Buffer,
            )?,
            momentum: BN_MOMENTUM,
            eps: NORM_EPS,
        })
    }

    pub fn forward<S: Float>(&self, sess: &mut Session<'_, S>, x: Var) -> Result<Var> {
        let gain = sess.param(self.gain);
        let bias = sess.param(self.bias);
        if sess.train() {
            let (y, stats) = sess.tape.batch_norm_train(x, gain, bias, self.eps)?;
            let m = S::of(self.momentum);
            let keep = S::one() - m;
            for (id, batch) in [(self.running_mean, &stats.mean), (self.running_var, &stats.var)] {
                let buf = sess.buffer_mut(id);
                for (r, &b) in buf.data_mut().iter_mut().zip(batch) {
                    *r = keep * *r + m * b;
                }
            }
            Ok(y)
        } else {
            let mean = sess.buffer(self.running_mean).data().to_vec();
            let var = sess.buffer(self.running_var).data().to_vec();
            sess.tape.batch_norm_eval(x, gain, bias, &mean, &var, self.eps)
        }
    }
}

/// Layer normalization over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<S: Float>(store: &mut ParamStore<S>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(vec![channels]), ParamKind::Norm)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![channels]), ParamKind::Norm)?,
            eps: NORM_EPS,
        })
    }

    pub fn forward<S: Float>(&self, sess: &mut Session<'_, S>, x: Var) -> Result<Var> {
        let g = sess.param(self.gain);
        let b = sess.param(self.bias);
        sess.tape.layer_norm(x, g, b, self.eps)
    }
}

/// `y = x·W + b` on `[B, in]` rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<S: Float>(
        store: &mut ParamStore<S>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (in_features as f64).sqrt();
        Ok(Self {
            weight: store.add(
                format!("{name}.weight"),
                uniform(&[in_features, out_features], bound, rng),
                ParamKind::Weight,
            )?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![out_features]), ParamKind::Bias)?,
            in_features,
            out_features,
        })
    }

    pub fn forward<S: Float>(&self, sess: &mut Session<'_, S>, x: Var) -> Result<Var> {
        let w = sess.param(self.weight);
        let b = sess.param(self.bias);
        let y = sess.tape.matmul(x, w)?;
        sess.tape.add_bias(y, b)
    }
}

/// Basic residual block: `skip(x) + relu(bn(conv(relu(bn(conv(x))))))`.
///
/// A strided or channel-changing block projects the skip path with a 1×1
/// convolution and batch norm.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv,
    pub bn1: BatchNorm,
    pub conv2: Conv,
    pub bn2: BatchNorm,
    pub projection: Option<(Conv, BatchNorm)>,
}

impl ResidualBlock {
    pub fn new<S: Float>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let conv1 = Conv::new(store, &format!("{name}.conv1"), c_in, c_out, &[3, 3], &[stride, stride], &[1, 1], rng)?;
        let bn1 = BatchNorm::new(store, &format!("{name}.bn1"), c_out)?;
        let conv2 = Conv::new(store, &format!("{name}.conv2"), c_out, c_out, &[3, 3], &[1, 1], &[1, 1], rng)?;
        let bn2 = BatchNorm::new(store, &format!("{name}.bn2"), c_out)?;
        let projection = if stride != 1 || c_in != c_out {
            Some((
                Conv::new(store, &format!("{name}.proj"), c_in, c_out, &[1, 1], &[stride, stride], &[0, 0], rng)?,
                BatchNorm::new(store, &format!("{name}.proj_bn"), c_out)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1,
            bn1,
            conv2,
            bn2,
            projection,
        })
    }

    pub fn forward<S: Float>(&self, sess: &mut Session<'_, S>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(sess, x)?;
        let h = self.bn1.forward(sess, h)?;
        let h = sess.tape.relu(h)?;
        let h = self.conv2.forward(sess, h)?;
        let h = self.bn2.forward(sess, h)?;
        let h = sess.tape.relu(h)?;
        let skip = match &self.projection {
            Some((conv, bn)) => {
                let s = conv.forward(sess, x)?;
                bn.forward(sess, s)?
            }
            None => x,
        };
        sess.tape.add(skip, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn batch_norm_updates_running_stats_in_train_only() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 1).unwrap();
        let x = Tensor::from_f64(vec![2, 1, 2], &[1.0, 3.0, 5.0, 7.0]).unwrap();
        {
            let mut sess = Session::new(&mut store, true, 0);
            let xv = sess.tape.constant(x.clone());
            bn.forward(&mut sess, xv).unwrap();
        }
        let rm = store.get(bn.running_mean).tensor.data()[0];
        let rv = store.get(bn.running_var).tensor.data()[0];
        assert!((rm - 0.4).abs() < 1e-12);
        // unbiased batch variance is 20/3
        assert!((rv - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-12);
        {
            let mut sess = Session::new(&mut store, false, 0);
            let xv = sess.tape.constant(x);
            bn.forward(&mut sess, xv).unwrap();
        }
        assert_eq!(store.get(bn.running_mean).tensor.data()[0], rm);
    }

    #[test]
    fn zero_weight_residual_block_is_skip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let block = ResidualBlock::new(&mut store, "b", 2, 2, 1, &mut rng).unwrap();
        for id in [block.conv1.weight, block.conv2.weight] {
            store.get_mut(id).tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = crate::gradcheck::randn(&[2, 2, 4, 4], &mut rng);
        let mut sess = Session::new(&mut store, true, 0);
        let xv = sess.tape.constant(x.clone());
        let y = block.forward(&mut sess, xv).unwrap();
        assert_eq!(sess.tape.data(y), x.data());
    }
}
