//! Central finite-difference gradients and the per-layer gradient suite.
//!
//! The suite checks each hand-written backward pass against
//! [`finite_difference_gradient`] applied to a random linear projection of
//! the forward output, `f(x) = Σ r_i · forward(x)_i`, whose exact gradient
//! is the backward pass evaluated at `grad_output = r`.
//!
//! Test points are drawn from the grid `±k/16, k = 1..=16`, and the step is
//! the power of two nearest `1e-3`. Every probe `x ± h` and every forward sum
//! is then exactly representable in `f32`, so central differences of the
//! linear layers carry no round-off and any disagreement is a real error in
//! the backward pass. With arbitrary `f32` points the forward round-off
//! divided by `2h` sits right at the `1e-3` tolerance.

use std::time::{Duration, Instant};

use super::{
    conv2d_backward, conv2d_forward, dropout, dropout_backward, fc_backward, fc_forward, mse_loss, relu, relu_backward,
    Tensor,
};
use crate::error::Result;
use crate::rng::{derive_seed, Rng};

/// Finite-difference step of the layer suite: `2^-10 ≈ 9.77e-4`.
pub const FD_STEP: f32 = 1.0 / 1024.0;
/// Maximum admissible relative error between analytic and numeric gradients.
pub const GRAD_TOLERANCE: f64 = 1e-3;

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element.
///
/// The divisor is the step actually realised in `f32` (`x_i + h` and `x_i - h`
/// are rounded), which removes the representation error of `h` itself.
pub fn finite_difference_gradient(f: impl Fn(&Tensor) -> f64, x: &Tensor, step: f32) -> Tensor {
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = x.data()[i];
        let plus = orig + step;
        let minus = orig - step;
        probe.data_mut()[i] = plus;
        let f_plus = f(&probe);
        probe.data_mut()[i] = minus;
        let f_minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = ((f_plus - f_minus) / (plus as f64 - minus as f64)) as f32;
    }
    grad
}

/// `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a as f64, n as f64))
        .fold(0.0, f64::max)
}

type ConvBackward = fn(&Tensor, &Tensor, usize, &Tensor) -> Result<(Tensor, Tensor, Tensor)>;
type FcBackward = fn(&Tensor, &Tensor, &Tensor) -> Result<(Tensor, Tensor, Tensor)>;
type ReluBackward = fn(&Tensor, &Tensor) -> Result<Tensor>;
type DropoutBackward = fn(&Tensor, f32, &Tensor) -> Result<Tensor>;
type MseLoss = fn(&Tensor, &Tensor) -> Result<(f64, Tensor)>;

/// The backward implementations under test. Swappable so the suite itself
/// can be checked against deliberately broken kernels.
#[derive(Clone, Copy)]
pub struct BackwardKernels {
    pub conv2d: ConvBackward,
    pub fc: FcBackward,
    pub relu: ReluBackward,
    pub dropout: DropoutBackward,
    pub mse: MseLoss,
}

impl Default for BackwardKernels {
    fn default() -> Self {
        Self {
            conv2d: conv2d_backward,
            fc: fc_backward,
            relu: relu_backward,
            dropout: dropout_backward,
            mse: mse_loss,
        }
    }
}

impl BackwardKernels {
    /// Mutation fixture: the real kernels except that the conv kernel
    /// gradient has its sign flipped. The suite must reject it.
    pub fn with_conv_sign_fault() -> Self {
        Self {
            conv2d: flipped_conv,
            ..Self::default()
        }
    }
}

fn flipped_conv(x: &Tensor, k: &Tensor, stride: usize, g: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (gi, mut gk, gb) = conv2d_backward(x, k, stride, g)?;
    gk.scale(-1.0);
    Ok((gi, gk, gb))
}

#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: &'static str,
    pub seeds: usize,
    pub max_relative_error: f64,
    pub worst_seed: u64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_relative_error <= GRAD_TOLERANCE
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub checks: Vec<OpCheck>,
    pub elapsed: Duration,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(OpCheck::passed)
    }
}

/// Random values on the grid `±k/16`, `k = 1..=16`. Magnitudes stay above
/// the step, so ReLU probes never straddle the kink.
pub fn dyadic(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let mag = (1 + rng.below(16)) as f32 / 16.0;
        if rng.bernoulli(0.5) {
            mag
        } else {
            -mag
        }
    })
}

fn project(out: &Tensor, r: &Tensor) -> f64 {
    out.data()
        .iter()
        .zip(r.data())
        .map(|(&o, &w)| o as f64 * w as f64)
        .sum()
}

struct Tracker {
    name: &'static str,
    seeds: usize,
    worst: f64,
    worst_seed: u64,
}

impl Tracker {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            seeds: 0,
            worst: 0.0,
            worst_seed: 0,
        }
    }

    fn record(&mut self, seed: u64, err: f64) {
        if err > self.worst || err.is_nan() {
            self.worst = if err.is_nan() { f64::INFINITY } else { err };
            self.worst_seed = seed;
        }
    }

    fn finish(self) -> OpCheck {
        OpCheck {
            name: self.name,
            seeds: self.seeds,
            max_relative_error: self.worst,
            worst_seed: self.worst_seed,
        }
    }
}

fn check_conv(kernels: &BackwardKernels, seed: u64, t: &mut Tracker) -> Result<()> {
    let mut rng = Rng::new(seed);
    let c_in = 1 + rng.below(3) as usize;
    let c_out = 1 + rng.below(3) as usize;
    let k = 1 + rng.below(5) as usize;
    let stride = 1 + rng.below(3) as usize;
    let h = k + rng.below(6) as usize;
    let w = k + rng.below(6) as usize;
    let x = dyadic(&[c_in, h, w], &mut rng);
    let wt = dyadic(&[c_out, c_in, k, k], &mut rng);
    let b = dyadic(&[c_out], &mut rng);
    let out = conv2d_forward(&x, &wt, &b, stride)?;
    let r = dyadic(out.shape(), &mut rng);
    let (gi, gk, gb) = (kernels.conv2d)(&x, &wt, stride, &r)?;

    let fx = finite_difference_gradient(
        |p| project(&conv2d_forward(p, &wt, &b, stride).unwrap(), &r),
        &x,
        FD_STEP,
    );
    let fk = finite_difference_gradient(
        |p| project(&conv2d_forward(&x, p, &b, stride).unwrap(), &r),
        &wt,
        FD_STEP,
    );
    let fb = finite_difference_gradient(
        |p| project(&conv2d_forward(&x, &wt, p, stride).unwrap(), &r),
        &b,
        FD_STEP,
    );
    let err = max_relative_error(&gi, &fx)
        .max(max_relative_error(&gk, &fk))
        .max(max_relative_error(&gb, &fb));
    t.record(seed, err);
    Ok(())
}

fn check_fc(kernels: &BackwardKernels, seed: u64, t: &mut Tracker) -> Result<()> {
    let mut rng = Rng::new(seed);
    let n_in = 1 + rng.below(12) as usize;
    let n_out = 1 + rng.below(6) as usize;
    let x = dyadic(&[n_in], &mut rng);
    let w = dyadic(&[n_out, n_in], &mut rng);
    let b = dyadic(&[n_out], &mut rng);
    let r = dyadic(&[n_out], &mut rng);
    let (gi, gw, gb) = (kernels.fc)(&x, &w, &r)?;
    let fx = finite_difference_gradient(|p| project(&fc_forward(p, &w, &b).unwrap(), &r), &x, FD_STEP);
    let fw = finite_difference_gradient(|p| project(&fc_forward(&x, p, &b).unwrap(), &r), &w, FD_STEP);
    let fb = finite_difference_gradient(|p| project(&fc_forward(&x, &w, p).unwrap(), &r), &b, FD_STEP);
    let err = max_relative_error(&gi, &fx)
        .max(max_relative_error(&gw, &fw))
        .max(max_relative_error(&gb, &fb));
    t.record(seed, err);
    Ok(())
}

fn check_relu(kernels: &BackwardKernels, seed: u64, t: &mut Tracker) -> Result<()> {
    let mut rng = Rng::new(seed);
    let n = 1 + rng.below(32) as usize;
    let x = dyadic(&[n], &mut rng);
    let r = dyadic(&[n], &mut rng);
    let g = (kernels.relu)(&x, &r)?;
    let f = finite_difference_gradient(|p| project(&relu(p), &r), &x, FD_STEP);
    t.record(seed, max_relative_error(&g, &f));
    Ok(())
}

fn check_dropout(kernels: &BackwardKernels, seed: u64, t: &mut Tracker) -> Result<()> {
    let mut rng = Rng::new(seed);
    let n = 1 + rng.below(32) as usize;
    let rate = rng.uniform_f32(0.0, 0.9);
    let mask_seed = rng.next_u64();
    let x = dyadic(&[n], &mut rng);
    let r = dyadic(&[n], &mut rng);
    let (_, mask) = dropout(&x, rate, &mut Rng::new(mask_seed), true)?;
    let g = (kernels.dropout)(&mask, rate, &r)?;
    // Re-drawing with the same seed reproduces the mask, so the probe sees
    // the same linear map as the analytic pass.
    let f = finite_difference_gradient(
        |p| project(&dropout(p, rate, &mut Rng::new(mask_seed), true).unwrap().0, &r),
        &x,
        FD_STEP,
    );
    t.record(seed, max_relative_error(&g, &f));
    Ok(())
}

fn check_mse(kernels: &BackwardKernels, seed: u64, t: &mut Tracker) -> Result<()> {
    let mut rng = Rng::new(seed);
    let n = 1 + rng.below(8) as usize;
    let p = dyadic(&[n], &mut rng);
    let target = dyadic(&[n], &mut rng);
    let (_, g) = (kernels.mse)(&p, &target)?;
    let f = finite_difference_gradient(|q| mse_loss(q, &target).unwrap().0, &p, FD_STEP);
    t.record(seed, max_relative_error(&g, &f));
    Ok(())
}

/// Runs every layer check on `seeds` independent random cases.
pub fn run_suite(kernels: &BackwardKernels, seeds: usize, base_seed: u64) -> Result<GradcheckReport> {
    let start = Instant::now();
    type Check = fn(&BackwardKernels, u64, &mut Tracker) -> Result<()>;
    let ops: [(&'static str, Check); 5] = [
        ("conv2d", check_conv),
        ("fc", check_fc),
        ("relu", check_relu),
        ("dropout", check_dropout),
        ("mse_loss", check_mse),
    ];
    let mut checks = Vec::with_capacity(ops.len());
    for (op_index, (name, check)) in ops.into_iter().enumerate() {
        let mut tracker = Tracker::new(name);
        let op_seed = derive_seed(base_seed, op_index as u64);
        for i in 0..seeds {
            check(kernels, derive_seed(op_seed, i as u64), &mut tracker)?;
            tracker.seeds += 1;
        }
        checks.push(tracker.finish());
    }
    Ok(GradcheckReport {
        checks,
        elapsed: start.elapsed(),
    })
}
