//! Central finite-difference checks of the tape's backward rules.
//!
//! The oracle only ever evaluates forward values, so it stays independent of
//! the backward code it checks. All checks run in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::model::{RalConfig, RalModel};
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::Tensor;

/// Denominator floor of [`relative_error`]; below it the comparison is
/// effectively absolute.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// Closeness guard around kinks (abs, relu, soft threshold).
pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tolerance: f64,
    pub e2e_tolerance: f64,
    pub e2e_samples: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tolerance: 1e-6,
            e2e_tolerance: 1e-4,
            e2e_samples: 25,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Worst {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct OpReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub worst: Option<Worst>,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }

    pub(crate) fn new(name: &str, tolerance: f64) -> Self {
        Self {
            name: name.to_owned(),
            checked: 0,
            max_rel_err: 0.0,
            tolerance,
            worst: None,
        }
    }

    pub(crate) fn record(&mut self, input: usize, element: usize, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_err || self.worst.is_none() || e.is_nan() {
            self.max_rel_err = if e.is_nan() { f64::INFINITY } else { e };
            self.worst = Some(Worst {
                input,
                element,
                analytic,
                numeric,
            });
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

pub type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Compares autodiff gradients of the scalar `build` against central
/// differences for every element of every input.
pub fn check_op(name: &str, inputs: &[Tensor<f64>], build: &Build<'_>, eps: f64, tolerance: f64) -> Result<OpReport> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.data(out)[0])
    };

    let mut report = OpReport::new(name, tolerance);
    let mut work = inputs.to_vec();
    for i in 0..work.len() {
        for j in 0..work[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = orig;
            report.record(i, j, analytic[i][j], (fp - fm) / (2.0 * eps));
        }
    }
    Ok(report)
}

/// Standard normal `f64` tensor.
pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

/// Standard normal values pushed at least [`KINK_MARGIN`] away from zero.
fn randn_away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let mut t = randn(shape, rng);
    for v in t.data_mut() {
        if v.abs() < 10.0 * KINK_MARGIN {
            *v += v.signum() * 10.0 * KINK_MARGIN;
        }
    }
    t
}

/// `sum(w ⊙ y)` for fixed pseudo-random weights, turning any output into a
/// scalar whose gradient exercises every output element.
pub fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = randn(tape.shape(y), &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum_all(p)
}

/// Forward pass of a parameterized module, reduced to a scalar.
pub type ModuleFn<'a> = dyn Fn(&mut Session<'_, f64>) -> Result<Var> + 'a;

/// Every element of every trainable parameter.
pub fn all_elements(store: &ParamStore<f64>) -> Vec<(ParamId, usize)> {
    store
        .iter()
        .filter(|p| p.kind.trainable())
        .flat_map(|p| {
            let id = store.id(&p.name).expect("registered");
            (0..p.tensor.len()).map(move |j| (id, j))
        })
        .collect()
}

/// `n` distinct trainable elements drawn uniformly over all scalars.
pub fn sample_elements(store: &ParamStore<f64>, n: usize, seed: u64) -> Vec<(ParamId, usize)> {
    let mut all = all_elements(store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n.min(all.len());
    for i in 0..n {
        let j = rng.random_range(i..all.len());
        all.swap(i, j);
    }
    all.truncate(n);
    all
}

/// Finite-difference check of parameter gradients through a whole module.
///
/// Buffers (running statistics) are restored after every evaluation so the
/// perturbed passes see the same state as the analytic one.
pub fn check_params(
    name: &str,
    store: &mut ParamStore<f64>,
    targets: &[(ParamId, usize)],
    forward: &ModuleFn<'_>,
    train: bool,
    eps: f64,
    tolerance: f64,
) -> Result<OpReport> {
    let snapshot = store.clone();
    store.zero_grads();
    {
        let mut sess = Session::new(store, train, 0);
        let loss = forward(&mut sess)?;
        sess.backward(loss)?;
    }
    let analytic: Vec<f64> = targets
        .iter()
        .map(|&(id, j)| store.get(id).tensor.grad().map_or(0.0, |g| g[j]))
        .collect();
    *store = snapshot.clone();

    let eval = |store: &mut ParamStore<f64>| -> Result<f64> {
        let mut sess = Session::new(store, train, 0);
        let out = forward(&mut sess)?;
        let v = sess.tape.data(out)[0];
        for (p, orig) in store.iter_mut().zip(snapshot.iter()) {
            if !p.kind.trainable() {
                p.tensor.data_mut().copy_from_slice(orig.tensor.data());
            }
        }
        Ok(v)
    };

    let mut report = OpReport::new(name, tolerance);
    for (&(id, j), &a) in targets.iter().zip(&analytic) {
        let orig = store.get(id).tensor.data()[j];
        store.get_mut(id).tensor.data_mut()[j] = orig + eps;
        let fp = eval(store)?;
        store.get_mut(id).tensor.data_mut()[j] = orig - eps;
        let fm = eval(store)?;
        store.get_mut(id).tensor.data_mut()[j] = orig;
        report.record(id.index(), j, a, (fp - fm) / (2.0 * eps));
    }
    Ok(report)
}

struct Case {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    build: Box<Build<'static>>,
}

fn case(name: &'static str, inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        name,
        inputs,
        build: Box::new(build),
    }
}

fn op_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let ws = seed;
    let mut cases = vec![
        case("matmul", vec![randn(&[3, 4], r), randn(&[4, 2], r)], move |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, ws)
        }),
        case("bmm", vec![randn(&[2, 3, 4], r), randn(&[2, 4, 2], r)], move |t, v| {
            let y = t.bmm(v[0], v[1])?;
            weighted_sum(t, y, ws)
        }),
        case("transpose", vec![randn(&[2, 3, 4], r)], move |t, v| {
            let y = t.transpose_last2(v[0])?;
            weighted_sum(t, y, ws)
        }),
        case("conv1d", vec![randn(&[2, 3, 7], r), randn(&[4, 3, 3], r)], move |t, v| {
            let y = t.conv1d(v[0], v[1], 1, 1)?;
            weighted_sum(t, y, ws)
        }),
        case("conv2d", vec![randn(&[2, 5, 5], r), randn(&[3, 2, 3, 3], r)], move |t, v| {
            let y = t.conv2d(v[0], v[1], [1, 1], [1, 1])?;
            weighted_sum(t, y, ws)
        }),
        case("conv2d_strided", vec![randn(&[2, 2, 6, 5], r), randn(&[3, 2, 3, 3], r)], move |t, v| {
            let y = t.conv2d(v[0], v[1], [2, 2], [1, 1])?;
            weighted_sum(t, y, ws)
        }),
        case("conv3d", vec![randn(&[1, 2, 4, 5, 5], r), randn(&[2, 2, 3, 3, 3], r)], move |t, v| {
            let y = t.conv3d(v[0], v[1], [1, 2, 2], [1, 1, 1])?;
            weighted_sum(t, y, ws)
        }),
        case("max_pool2d", vec![randn(&[2, 2, 4, 6], r)], move |t, v| {
            let y = t.max_pool2d(v[0], 2, 2)?;
            weighted_sum(t, y, ws)
        }),
        case("global_avg_pool", vec![randn(&[2, 3, 4, 5], r)], move |t, v| {
            let y = t.global_avg_pool(v[0])?;
            weighted_sum(t, y, ws)
        }),
        case("mean_axis", vec![randn(&[2, 3, 4], r)], move |t, v| {
            let y = t.mean_axis(v[0], 1)?;
            weighted_sum(t, y, ws)
        }),
        case("sum", vec![randn(&[3, 4], r)], move |t, v| {
            let y = t.sum_all(v[0])?;
            weighted_sum(t, y, ws)
        }),
        case("mean_all", vec![randn(&[3, 4], r)], move |t, v| {
            let y = t.mean_all(v[0])?;
            weighted_sum(t, y, ws)
        }),
        case("abs", vec![randn_away_from_zero(&[3, 5], r)], move |t, v| {
            let y = t.abs(v[0])?;
            weighted_sum(t, y, ws)
        }),
        case("relu", vec![randn_away_from_zero(&[3, 5], r)], move |t, v| {
            let y = t.relu(v[0])?;
            weighted_sum(t, y, ws)
        }),
        case("sigmoid", vec![randn(&[3, 5], r)], move |t, v| {
            let y = t.sigmoid(v[0])?;
            weighted_sum(t, y, ws)
        }),
        case("softmax", vec![randn(&[3, 5], r)], move |t, v| {
            let y = t.softmax_lastdim(v[0])?;
            weighted_sum(t, y, ws)
        }),
        case("layer_norm", vec![randn(&[4, 5], r), randn(&[5], r), randn(&[5], r)], move |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(t, y, ws)
        }),
        case("batch_norm", vec![randn(&[3, 2, 3, 3], r), randn(&[2], r), randn(&[2], r)], move |t, v| {
            let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(t, y, ws)
        }),
        case("batch_norm_eval", vec![randn(&[3, 2, 3, 3], r), randn(&[2], r), randn(&[2], r)], move |t, v| {
            let y = t.batch_norm_eval(v[0], v[1], v[2], &[0.3, -0.2], &[1.5, 0.7], 1e-5)?;
            weighted_sum(t, y, ws)
        }),
        case("add", vec![randn(&[3, 4], r), randn(&[3, 4], r)], move |t, v| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y, ws)
        }),
        case("sub", vec![randn(&[3, 4], r), randn(&[3, 4], r)], move |t, v| {
            let y = t.sub(v[0], v[1])?;
            weighted_sum(t, y, ws)
        }),
        case("mul", vec![randn(&[3, 4], r), randn(&[3, 4], r)], move |t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y, ws)
        }),
        case("scalar_mul", vec![randn(&[3, 4], r)], move |t, v| {
            let y = t.scale(v[0], -1.7)?;
            weighted_sum(t, y, ws)
        }),
        case("scale_by", vec![randn(&[3, 4], r), randn(&[1], r)], move |t, v| {
            let y = t.scale_by(v[0], v[1])?;
            weighted_sum(t, y, ws)
        }),
        case("reshape", vec![randn(&[3, 4], r)], move |t, v| {
            let y = t.reshape(v[0], vec![2, 6])?;
            weighted_sum(t, y, ws)
        }),
        case("permute", vec![randn(&[2, 3, 4], r)], move |t, v| {
            let y = t.permute(v[0], &[2, 0, 1])?;
            weighted_sum(t, y, ws)
        }),
        case("narrow", vec![randn(&[2, 3, 5], r)], move |t, v| {
            let y = t.narrow(v[0], 2, 1, 3)?;
            weighted_sum(t, y, ws)
        }),
        case("flip", vec![randn(&[2, 3, 4], r)], move |t, v| {
            let y = t.flip(v[0], 2)?;
            weighted_sum(t, y, ws)
        }),
        case("concat", vec![randn(&[2, 3, 2], r), randn(&[2, 3, 1], r)], move |t, v| {
            let y = t.concat(&[v[0], v[1]], 2)?;
            weighted_sum(t, y, ws)
        }),
        case("add_bias", vec![randn(&[3, 4], r), randn(&[4], r)], move |t, v| {
            let y = t.add_bias(v[0], v[1])?;
            weighted_sum(t, y, ws)
        }),
        case("dropout", vec![randn(&[4, 5], r)], move |t, v| {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(ws);
            let y = t.dropout(v[0], 0.3, &mut mask_rng)?;
            weighted_sum(t, y, ws)
        }),
        case("cross_entropy", vec![randn(&[3, 4], r)], move |t, v| t.cross_entropy_logits(v[0], &[1, 3, 0])),
    ];

    // Soft threshold: keep |x| at least KINK_MARGIN away from its threshold.
    let tau = Tensor::<f64>::from_f64(vec![2, 3], &[0.2, 0.5, 0.05, 0.8, 0.3, 0.4]).expect("shape");
    let mut x = randn(&[2, 3, 2, 2], r);
    for (c, &th) in tau.data().iter().enumerate() {
        for v in &mut x.data_mut()[c * 4..(c + 1) * 4] {
            if (v.abs() - th).abs() < 10.0 * KINK_MARGIN {
                *v += v.signum() * 20.0 * KINK_MARGIN;
            }
        }
    }
    cases.push(case("soft_threshold", vec![x, tau], move |t, v| {
        let y = t.soft_threshold(v[0], v[1])?;
        weighted_sum(t, y, ws)
    }));
    cases
}

/// Names of every op covered by [`op_suite`].
pub fn op_names() -> Vec<&'static str> {
    op_cases(0).iter().map(|c| c.name).collect()
}

/// Runs the per-op finite-difference suite.
pub fn op_suite(cfg: &GradCheckConfig) -> Result<Vec<OpReport>> {
    op_cases(cfg.seed)
        .iter()
        .map(|c| check_op(c.name, &c.inputs, c.build.as_ref(), cfg.eps, cfg.tolerance))
        .collect()
}

/// Tiny network with every component switched on.
pub fn e2e_config() -> RalConfig {
    RalConfig {
        num_classes: 2,
        frontend_channels: 4,
        stage_channels: vec![4, 4],
        acvi_after_stage: vec![true, true],
        tcn_branch_channels: 4,
        ..RalConfig::default()
    }
}

/// Loss gradient of the whole network on a two-clip batch, checked on
/// `cfg.e2e_samples` randomly chosen parameter elements.
pub fn end_to_end(cfg: &GradCheckConfig) -> Result<OpReport> {
    let mut model = RalModel::<f64>::new(&e2e_config(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xe2e);
    // Nonzero fusion scales so the attention weights influence the loss.
    for p in model.store.iter_mut() {
        if p.name.contains(".alpha_") {
            p.tensor.data_mut()[0] = 0.5;
        }
    }
    let x = randn(&[2, 1, 4, 16, 16], &mut rng);
    let labels = [0usize, 1];
    let targets = sample_elements(&model.store, cfg.e2e_samples, cfg.seed);
    let net = model.net.clone();
    let forward = |sess: &mut Session<'_, f64>| {
        let xv = sess.tape.constant(x.clone());
        let logits = net.forward(sess, xv)?;
        sess.tape.cross_entropy_logits(logits, &labels)
    };
    check_params(
        "end_to_end",
        &mut model.store,
        &targets,
        &forward,
        true,
        cfg.eps,
        cfg.e2e_tolerance,
    )
}

/// Every per-op report followed by the end-to-end report.
pub fn full_suite(cfg: &GradCheckConfig) -> Result<Vec<OpReport>> {
    let mut reports = op_suite(cfg)?;
    reports.push(end_to_end(cfg)?);
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::inject_backward_sign_flip;

    #[test]
    fn every_op_passes_at_default_tolerance() {
        let reports = op_suite(&GradCheckConfig::default()).unwrap();
        for r in &reports {
            assert!(r.passed(), "{} max rel err {:e} ({:?})", r.name, r.max_rel_err, r.worst);
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn sign_flip_in_conv2d_backward_is_caught() {
        inject_backward_sign_flip(Some("conv2d"));
        let reports = op_suite(&GradCheckConfig::default()).unwrap();
        inject_backward_sign_flip(None);
        let failing: Vec<_> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
        assert!(failing.contains(&"conv2d"));
        assert!(!failing.contains(&"conv3d"));
    }

    #[test]
    fn gap_gradient_is_uniform_share() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::ones(vec![2, 3, 4]));
        let y = tape.global_avg_pool(x).unwrap();
        let l = tape.sum_all(y).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| (g - 1.0 / 12.0).abs() < 1e-15));
    }

    #[test]
    fn end_to_end_passes() {
        let r = end_to_end(&GradCheckConfig::default()).unwrap();
        assert_eq!(r.checked, 25);
        assert!(r.passed(), "max rel err {:e} ({:?})", r.max_rel_err, r.worst);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9) - 1e-6).abs() < 1e-18);
    }
}
