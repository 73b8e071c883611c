//! Interpolant paths, the conditional velocity field, time sampling, and a
//! quadrature oracle for exact mean velocities.
//!
//! # Time convention
//!
//! The prior sits at time 0 and data at time 1; the path is
//! `x_t = t*x1 + (1-t)*x0 + gamma(t)*eps` with `gamma(t) = eta*(1-t)`, so the
//! data endpoint is exact and the conditional velocity points from prior to
//! data. Training draws pairs `r <= t` and regresses the field spanning
//! `[r, t]` with the state labelled `t`. Transport queries label a span by
//! its endpoints with the input state fed at the *destination* label: a step
//! from grid time `a` to `b > a` evaluates the field at `(t, r) = (b, a)` and
//! updates `x += (b - a) * u`. At full span this is exactly the one-step
//! generation rule `x1_hat = x0 + u(x0)` with the query at `(t, r) = (1, 0)`,
//! and under grid refinement the step converges to the probability-flow ODE.

use crate::rng::Rng;
use crate::tensor::Tensor;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

/// Path and noise-scale configuration shared by training and sampling.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct InterpolantConfig {
    /// Scale of the path noise `gamma(t) = eta*(1-t)`; 0 disables it.
    pub eta: f64,
    /// Target smoothing: generated samples carry this much Gaussian noise.
    pub sigma_min: f64,
    /// Intermediate noise applied to the transport endpoint, `sigma < sigma_min`.
    pub sigma: f64,
    /// Guided-prior noise scale.
    pub sigma_c: f64,
    /// Upper clamp on `t`; the velocity formula has a `1/(1-t)` factor.
    pub t_clamp: f64,
}

impl Default for InterpolantConfig {
    fn default() -> Self {
        InterpolantConfig {
            eta: 5e-2,
            sigma_min: 1e-3,
            sigma: 5e-4,
            sigma_c: 1e-3,
            t_clamp: 1.0 - 1e-5,
        }
    }
}

impl InterpolantConfig {
    pub fn validate(&self) -> Result<(), FlowError> {
        if !(self.sigma >= 0.0 && self.sigma < self.sigma_min) {
            return Err(FlowError::BadConfig("need 0 <= sigma < sigma_min"));
        }
        if self.eta < 0.0 {
            return Err(FlowError::BadConfig("eta must be nonnegative"));
        }
        if self.eta > 0.0 && !(self.t_clamp > 0.0 && self.t_clamp < 1.0) {
            return Err(FlowError::BadConfig("need 0 < t_clamp < 1 when eta > 0"));
        }
        if self.sigma_c < 0.0 {
            return Err(FlowError::BadConfig("sigma_c must be nonnegative"));
        }
        Ok(())
    }

    /// Standard deviation `sqrt(sigma_min^2 - sigma^2)` of the injected noise.
    pub fn injection_std(&self) -> f64 {
        crate::mathx::sqrt(self.sigma_min * self.sigma_min - self.sigma * self.sigma)
    }
}

/// Probability `q` of drawing `r` strictly below `t` (otherwise `r = t`).
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TimeSamplerConfig {
    pub q: f64,
}

impl Default for TimeSamplerConfig {
    fn default() -> Self {
        TimeSamplerConfig { q: 0.5 }
    }
}

impl TimeSamplerConfig {
    pub fn validate(&self) -> Result<(), FlowError> {
        if !(0.0..=1.0).contains(&self.q) {
            return Err(FlowError::BadConfig("q must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One training batch: coupling endpoints, path state, times, and the
/// conditional velocity at the state.
#[derive(Debug, Clone)]
pub struct FlowBatch {
    pub x0: Tensor,
    pub x1: Tensor,
    pub xt: Tensor,
    pub t: Tensor,
    pub r: Tensor,
    pub v_cond: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FlowError {
    BadConfig(&'static str),
    /// `t` reached the clamp while the path noise is active.
    TimeAtSingularity { t: f64, t_clamp: f64 },
    DegenerateSpan,
    Numeric(String),
}

impl fmt::Display for FlowError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FlowError::BadConfig(msg) => write!(f, "invalid flow config: {msg}"),
            FlowError::TimeAtSingularity { t, t_clamp } => {
                write!(f, "t = {t} at or beyond clamp {t_clamp} with eta > 0")
            }
            FlowError::DegenerateSpan => write!(f, "mean velocity needs t != r"),
            FlowError::Numeric(msg) => write!(f, "numeric failure: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for FlowError {}

/// Draws `t` with density `2t` on `[0,1]` (inverse CDF: `sqrt(u)`) and, with
/// probability `q`, `r` uniform on `[0, t)`; otherwise `r = t`.
pub fn sample_times(rng: &mut Rng, cfg: TimeSamplerConfig, batch: usize) -> (Tensor, Tensor) {
    let mut t = Vec::with_capacity(batch);
    let mut r = Vec::with_capacity(batch);
    for _ in 0..batch {
        let ti = crate::mathx::sqrt(rng.uniform());
        let ri = if rng.uniform() < cfg.q { rng.uniform() * ti } else { ti };
        t.push(ti);
        r.push(ri);
    }
    (Tensor::from_vec(vec![batch], t), Tensor::from_vec(vec![batch], r))
}

/// Path state `x_t = t*x1 + (1-t)*x0 [+ gamma(t)*eps]`, drawing the path
/// noise from `rng` when `eta > 0`.
pub fn interpolate(rng: &mut Rng, cfg: &InterpolantConfig, x0: &Tensor, x1: &Tensor, t: &Tensor) -> Tensor {
    if cfg.eta > 0.0 {
        let eps = rng.randn(x0.shape());
        interpolate_with_noise(cfg, x0, x1, t, Some(&eps))
    } else {
        interpolate_with_noise(cfg, x0, x1, t, None)
    }
}

/// Deterministic variant taking the path noise explicitly (tests pin eps).
pub fn interpolate_with_noise(
    cfg: &InterpolantConfig,
    x0: &Tensor,
    x1: &Tensor,
    t: &Tensor,
    eps: Option<&Tensor>,
) -> Tensor {
    assert_eq!(x0.shape(), x1.shape(), "interpolate: x0 {:?} vs x1 {:?}", x0.shape(), x1.shape());
    assert_eq!(x0.rows(), t.len(), "interpolate: {} rows vs {} times", x0.rows(), t.len());
    let b = x0.rows();
    let d = x0.row_len();
    let mut out = Tensor::zeros(x0.shape());
    for i in 0..b {
        let ti = t.data()[i];
        let g = cfg.eta * (1.0 - ti);
        for j in 0..d {
            let base = ti * x1.data()[i * d + j] + (1.0 - ti) * x0.data()[i * d + j];
            out.data_mut()[i * d + j] = match eps {
                Some(e) if cfg.eta > 0.0 => base + g * e.data()[i * d + j],
                _ => base,
            };
        }
    }
    out
}

/// Conditional velocity at `x` given the coupling `(x0, x1)` and time `t`:
/// `(gdot/g)*(x - t*x1 - (1-t)*x0) + (x1 - x0)` with `gdot/g = -1/(1-t)`.
/// With `eta = 0` the path is deterministic and the whole first term drops.
pub fn conditional_velocity(
    cfg: &InterpolantConfig,
    x: &Tensor,
    x0: &Tensor,
    x1: &Tensor,
    t: &Tensor,
) -> Result<Tensor, FlowError> {
    let diff = x1.sub(x0);
    if cfg.eta == 0.0 {
        return Ok(diff);
    }
    let b = x.rows();
    let d = x.row_len();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..b {
        let ti = t.data()[i];
        if ti >= cfg.t_clamp {
            return Err(FlowError::TimeAtSingularity { t: ti, t_clamp: cfg.t_clamp });
        }
        let coeff = -1.0 / (1.0 - ti);
        for j in 0..d {
            let resid = x.data()[i * d + j] - ti * x1.data()[i * d + j] - (1.0 - ti) * x0.data()[i * d + j];
            out.data_mut()[i * d + j] = coeff * resid + diff.data()[i * d + j];
        }
    }
    Ok(out)
}

/// Test oracle: `(1/(r-t)) * integral_t^r u_s ds` by composite Simpson with
/// `n_quad` points (odd, >= 3). `field(s)` is the instantaneous velocity
/// along the exact path at time `s`. Not used by training.
pub fn mean_velocity_exact(
    field: &dyn Fn(f64) -> Tensor,
    t: f64,
    r: f64,
    n_quad: usize,
) -> Result<Tensor, FlowError> {
    if t == r {
        return Err(FlowError::DegenerateSpan);
    }
    assert!(n_quad >= 3 && n_quad % 2 == 1, "n_quad must be odd and >= 3, got {n_quad}");
    let h = (r - t) / (n_quad - 1) as f64;
    let mut acc = field(t);
    for i in 1..n_quad - 1 {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc = acc.add_scaled(&field(t + h * i as f64), w);
    }
    acc = acc.add_scaled(&field(r), 1.0);
    // integral = acc * h/3; mean = integral / (r - t).
    Ok(acc.scale(h / 3.0 / (r - t)))
}

/// Margin below the clamp used when constructing training batches, so batch
/// times always satisfy the strict `t < t_clamp` precondition.
const CLAMP_MARGIN: f64 = 1e-7;

/// Assembles a training batch from coupled endpoints: samples `(t, r)`,
/// clamps `t` away from the singularity when the path noise is on, draws the
/// path state, and evaluates the conditional velocity at it.
pub fn make_flow_batch(
    rng: &mut Rng,
    icfg: &InterpolantConfig,
    tcfg: TimeSamplerConfig,
    x0: Tensor,
    x1: Tensor,
) -> Result<FlowBatch, FlowError> {
    let b = x0.rows();
    let (mut t, mut r) = sample_times(rng, tcfg, b);
    if icfg.eta > 0.0 {
        let cap = icfg.t_clamp - CLAMP_MARGIN;
        for i in 0..b {
            if t.data()[i] > cap {
                t.data_mut()[i] = cap;
            }
            if r.data()[i] > t.data()[i] {
                r.data_mut()[i] = t.data()[i];
            }
        }
    }
    let xt = interpolate(rng, icfg, &x0, &x1, &t);
    let v_cond = conditional_velocity(icfg, &xt, &x0, &x1, &t)?;
    Ok(FlowBatch { x0, x1, xt, t, r, v_cond })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_noise() -> InterpolantConfig {
        InterpolantConfig { eta: 0.0, ..InterpolantConfig::default() }
    }

    #[test]
    fn times_q_zero_means_r_equals_t() {
        let mut rng = Rng::new(1);
        let (t, r) = sample_times(&mut rng, TimeSamplerConfig { q: 0.0 }, 1000);
        assert_eq!(t.data(), r.data());
    }

    #[test]
    fn times_marginal_passes_ks_against_square_cdf() {
        let mut rng = Rng::new(2);
        let n = 1_000_000;
        let (t, _) = sample_times(&mut rng, TimeSamplerConfig { q: 0.5 }, n);
        let mut ts = t.into_data();
        ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut ks: f64 = 0.0;
        for (i, &x) in ts.iter().enumerate() {
            let cdf = x * x;
            let emp_hi = (i + 1) as f64 / n as f64;
            let emp_lo = i as f64 / n as f64;
            ks = ks.max((emp_hi - cdf).abs()).max((cdf - emp_lo).abs());
        }
        assert!(ks < 2e-3, "KS statistic {ks}");
    }

    #[test]
    fn times_branch_fraction_matches_q() {
        let mut rng = Rng::new(3);
        let n = 1_000_000;
        let (t, r) = sample_times(&mut rng, TimeSamplerConfig { q: 0.5 }, n);
        let eq = t.data().iter().zip(r.data()).filter(|(a, b)| a == b).count();
        let frac = eq as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.0016, "fraction {frac}");
        // r <= t always.
        assert!(t.data().iter().zip(r.data()).all(|(a, b)| b <= a));
    }

    #[test]
    fn interpolate_endpoints() {
        let cfg = InterpolantConfig::default();
        let mut rng = Rng::new(4);
        let x0 = rng.randn(&[3, 2]);
        let x1 = rng.randn(&[3, 2]);
        let eps = rng.randn(&[3, 2]);

        // t = 1: data endpoint exact, gamma(1) = 0, bitwise equal to x1.
        let t1 = Tensor::full(&[3], 1.0);
        let at1 = interpolate_with_noise(&cfg, &x0, &x1, &t1, Some(&eps));
        assert_eq!(at1.data(), x1.data());

        // t = 0 with eta = 0: exactly x0.
        let t0 = Tensor::zeros(&[3]);
        let at0 = interpolate_with_noise(&no_noise(), &x0, &x1, &t0, None);
        assert_eq!(at0.data(), x0.data());

        // t = 0 with eta > 0: x0 + eta * eps.
        let at0n = interpolate_with_noise(&cfg, &x0, &x1, &t0, Some(&eps));
        for i in 0..6 {
            assert!((at0n.data()[i] - (x0.data()[i] + cfg.eta * eps.data()[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn interpolate_midpoint_eta_zero() {
        let x0 = Tensor::from_vec(vec![1, 1], vec![0.0]);
        let x1 = Tensor::from_vec(vec![1, 1], vec![2.0]);
        let t = Tensor::from_vec(vec![1], vec![0.5]);
        let xt = interpolate_with_noise(&no_noise(), &x0, &x1, &t, None);
        assert_eq!(xt.data(), &[1.0]);
    }

    #[test]
    fn velocity_on_path_is_endpoint_difference() {
        let mut rng = Rng::new(5);
        let x0 = rng.randn(&[4, 3]);
        let x1 = rng.randn(&[4, 3]);
        let t = Tensor::from_vec(vec![4], vec![0.1, 0.4, 0.7, 0.95]);
        for cfg in [no_noise(), InterpolantConfig::default()] {
            let on_path = interpolate_with_noise(&no_noise(), &x0, &x1, &t, None);
            let u = conditional_velocity(&cfg, &on_path, &x0, &x1, &t).unwrap();
            let expect = x1.sub(&x0);
            for (a, b) in u.data().iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b} (eta {})", cfg.eta);
            }
        }
    }

    #[test]
    fn velocity_eta_zero_is_rectified() {
        let x0 = Tensor::from_vec(vec![1, 1], vec![0.0]);
        let x1 = Tensor::from_vec(vec![1, 1], vec![3.0]);
        for (x, t) in [(5.0, 0.3), (-2.0, 0.9), (0.0, 0.0)] {
            let xp = Tensor::from_vec(vec![1, 1], vec![x]);
            let tt = Tensor::from_vec(vec![1], vec![t]);
            let u = conditional_velocity(&no_noise(), &xp, &x0, &x1, &tt).unwrap();
            assert_eq!(u.data(), &[3.0]);
        }
    }

    #[test]
    fn velocity_matches_direct_formula_off_path() {
        let mut rng = Rng::new(6);
        let cfg = InterpolantConfig { eta: 0.05, ..InterpolantConfig::default() };
        let x0 = rng.randn(&[2, 3]);
        let x1 = rng.randn(&[2, 3]);
        let x = rng.randn(&[2, 3]);
        let t = Tensor::from_vec(vec![2], vec![0.5, 0.25]);
        let u = conditional_velocity(&cfg, &x, &x0, &x1, &t).unwrap();
        for i in 0..2 {
            let ti = t.data()[i];
            let coeff = -1.0 / (1.0 - ti);
            for j in 0..3 {
                let idx = i * 3 + j;
                let expect = coeff * (x.data()[idx] - ti * x1.data()[idx] - (1.0 - ti) * x0.data()[idx])
                    + (x1.data()[idx] - x0.data()[idx]);
                assert_eq!(u.data()[idx], expect);
            }
        }
    }

    #[test]
    fn velocity_translation_equivariance() {
        let mut rng = Rng::new(7);
        let cfg = InterpolantConfig { eta: 0.05, ..InterpolantConfig::default() };
        let x0 = rng.randn(&[3, 2]);
        let x1 = rng.randn(&[3, 2]);
        let x = rng.randn(&[3, 2]);
        let t = Tensor::from_vec(vec![3], vec![0.2, 0.5, 0.8]);
        let shift = rng.randn(&[1, 2]);
        let mut shifted = |v: &Tensor| {
            let mut out = v.clone();
            for i in 0..3 {
                for j in 0..2 {
                    out.data_mut()[i * 2 + j] += shift.data()[j];
                }
            }
            out
        };
        let u = conditional_velocity(&cfg, &x, &x0, &x1, &t).unwrap();
        let us = conditional_velocity(&cfg, &shifted(&x), &shifted(&x0), &shifted(&x1), &t).unwrap();
        for (a, b) in u.data().iter().zip(us.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn velocity_errors_at_clamp() {
        let cfg = InterpolantConfig::default();
        let x = Tensor::zeros(&[1, 1]);
        let t = Tensor::from_vec(vec![1], vec![1.0]);
        let err = conditional_velocity(&cfg, &x, &x, &x, &t);
        assert!(matches!(err, Err(FlowError::TimeAtSingularity { .. })));
    }

    #[test]
    fn mean_velocity_constant_and_linear_fields() {
        let c = Tensor::from_vec(vec![1, 2], vec![3.0, -1.0]);
        let cc = c.clone();
        let m = mean_velocity_exact(&move |_s| cc.clone(), 0.2, 0.9, 9).unwrap();
        for (a, b) in m.data().iter().zip(c.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        // u_s = s over [0, 1]: mean 0.5. Works in either span direction.
        let lin = |s: f64| Tensor::from_vec(vec![1, 1], vec![s]);
        let m = mean_velocity_exact(&lin, 0.0, 1.0, 9).unwrap();
        assert!((m.data()[0] - 0.5).abs() < 1e-14);
        let m = mean_velocity_exact(&lin, 1.0, 0.0, 9).unwrap();
        assert!((m.data()[0] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn simpson_error_shrinks_sixteen_fold() {
        // Smooth non-polynomial field with a known integral:
        // integral of e^s over [0.1, 0.9] = e^0.9 - e^0.1.
        let field = |s: f64| Tensor::from_vec(vec![1, 1], vec![libm::exp(s)]);
        let exact = (libm::exp(0.9) - libm::exp(0.1)) / 0.8;
        let err = |n: usize| {
            (mean_velocity_exact(&field, 0.1, 0.9, n).unwrap().data()[0] - exact).abs()
        };
        let ratio = err(9) / err(17);
        assert!(ratio > 10.0 && ratio < 22.0, "ratio {ratio}");
    }

    #[test]
    fn mean_velocity_rejects_equal_times() {
        let f = |_s: f64| Tensor::zeros(&[1, 1]);
        assert!(matches!(mean_velocity_exact(&f, 0.5, 0.5, 9), Err(FlowError::DegenerateSpan)));
    }

    #[test]
    fn flow_batch_respects_clamp_and_order() {
        let mut rng = Rng::new(8);
        let icfg = InterpolantConfig::default();
        let x0 = rng.randn(&[64, 2]);
        let x1 = rng.randn(&[64, 2]);
        let batch = make_flow_batch(&mut rng, &icfg, TimeSamplerConfig { q: 0.7 }, x0, x1).unwrap();
        for i in 0..64 {
            assert!(batch.r.data()[i] <= batch.t.data()[i]);
            assert!(batch.t.data()[i] < icfg.t_clamp);
        }
        batch.v_cond.assert_finite("v_cond");
    }

    #[test]
    fn gaussian_shift_coupling_has_constant_velocity() {
        // x1 = x0 + mu with eta = 0: the conditional velocity is mu anywhere.
        let mut rng = Rng::new(9);
        let mu = 2.5;
        let x0 = rng.randn(&[16, 1]);
        let x1 = x0.map(|v| v + mu);
        let batch = make_flow_batch(&mut rng, &no_noise(), TimeSamplerConfig { q: 0.5 }, x0, x1).unwrap();
        for &v in batch.v_cond.data() {
            assert!((v - mu).abs() < 1e-12);
        }
    }
}
