//! Data generators and ground truths: 1-D Gaussian mixture, 2-D
//! checkerboard, and Lorenz / FitzHugh-Nagumo trajectory datasets with
//! event constraints.
//!
//! Trajectory data is z-scored per system coordinate with statistics from
//! the training set; those statistics travel with the checkpoint so
//! sampling and evaluation stay consistent.

use crate::flow::FlowError;
use crate::rng::Rng;
use crate::tensor::Tensor;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

/// Three-component 1-D Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GmmSpec {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl Default for GmmSpec {
    fn default() -> Self {
        GmmSpec {
            weights: vec![0.35, 0.25, 0.4],
            means: vec![1.5, 0.5, -1.5],
            variances: vec![0.04, 0.04, 0.04],
        }
    }
}

impl GmmSpec {
    pub fn validate(&self) -> Result<(), FlowError> {
        let s: f64 = self.weights.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(FlowError::BadConfig("mixture weights must sum to 1"));
        }
        if self.variances.iter().any(|&v| v <= 0.0) {
            return Err(FlowError::BadConfig("mixture variances must be positive"));
        }
        Ok(())
    }

    pub fn density(&self, x: f64) -> f64 {
        let mut p = 0.0;
        for ((&w, &m), &v) in self.weights.iter().zip(&self.means).zip(&self.variances) {
            let z = (x - m) * (x - m) / (2.0 * v);
            p += w * crate::mathx::exp(-z) / crate::mathx::sqrt(2.0 * core::f64::consts::PI * v);
        }
        p
    }
}

/// Component by categorical weight, then a Gaussian draw.
pub fn sample_gmm(rng: &mut Rng, spec: &GmmSpec, n: usize) -> Tensor {
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.categorical(&spec.weights);
        data.push(spec.means[k] + crate::mathx::sqrt(spec.variances[k]) * rng.normal());
    }
    Tensor::from_vec(vec![n, 1], data)
}

/// Alternating-cell uniform density on a square domain. Cell `(i, j)` is
/// "on" iff `i + j` is even, so a 2x2 board keeps the two diagonal cells.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CheckerboardSpec {
    /// Domain half-width: the board covers `[-extent, extent]^2`.
    pub extent: f64,
    /// Cells per side; must be even so the pattern tiles.
    pub cells: usize,
}

impl Default for CheckerboardSpec {
    fn default() -> Self {
        CheckerboardSpec { extent: 2.0, cells: 4 }
    }
}

impl CheckerboardSpec {
    pub fn validate(&self) -> Result<(), FlowError> {
        if self.cells == 0 || self.cells % 2 != 0 {
            return Err(FlowError::BadConfig("checkerboard needs an even, positive cell count"));
        }
        if self.extent <= 0.0 {
            return Err(FlowError::BadConfig("checkerboard extent must be positive"));
        }
        Ok(())
    }

    pub fn cell_width(&self) -> f64 {
        2.0 * self.extent / self.cells as f64
    }

    pub fn cell_on(&self, i: usize, j: usize) -> bool {
        (i + j) % 2 == 0
    }

    /// Indices of the "on" cells, row-major.
    pub fn on_cells(&self) -> Vec<(usize, usize)> {
        let mut cells = Vec::new();
        for i in 0..self.cells {
            for j in 0..self.cells {
                if self.cell_on(i, j) {
                    cells.push((i, j));
                }
            }
        }
        cells
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let w = self.cell_width();
        if x < -self.extent || x >= self.extent || y < -self.extent || y >= self.extent {
            return false;
        }
        let i = ((x + self.extent) / w) as usize;
        let j = ((y + self.extent) / w) as usize;
        self.cell_on(i.min(self.cells - 1), j.min(self.cells - 1))
    }
}

/// Rejection-free: pick an "on" cell uniformly, then uniform inside it.
pub fn sample_checkerboard(rng: &mut Rng, spec: &CheckerboardSpec, n: usize) -> Tensor {
    let on = spec.on_cells();
    let w = spec.cell_width();
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let (i, j) = on[(rng.next_u64() % on.len() as u64) as usize];
        data.push(-spec.extent + w * (i as f64 + rng.uniform()));
        data.push(-spec.extent + w * (j as f64 + rng.uniform()));
    }
    Tensor::from_vec(vec![n, 2], data)
}

/// Which dynamical system a trajectory task integrates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum DynSystem {
    Lorenz,
    FitzHughNagumo,
}

impl DynSystem {
    pub fn dim(&self) -> usize {
        match self {
            DynSystem::Lorenz => 3,
            DynSystem::FitzHughNagumo => 2,
        }
    }

    /// Right-hand side with classic parameters: Lorenz sigma=10, rho=28,
    /// beta=8/3; FitzHugh-Nagumo I=0.5, a=0.7, b=0.8, eps=0.08.
    pub fn rhs(&self, s: &[f64], out: &mut [f64]) {
        match self {
            DynSystem::Lorenz => {
                out[0] = 10.0 * (s[1] - s[0]);
                out[1] = s[0] * (28.0 - s[2]) - s[1];
                out[2] = s[0] * s[1] - (8.0 / 3.0) * s[2];
            }
            DynSystem::FitzHughNagumo => {
                out[0] = s[0] - s[0] * s[0] * s[0] / 3.0 - s[1] + 0.5;
                out[1] = 0.08 * (s[0] + 0.7 - 0.8 * s[1]);
            }
        }
    }
}

/// Trajectory task: integration grid, initial-condition box, and the event
/// constraint. The flattened data dimension is `steps * dim`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrajectorySpec {
    pub system: DynSystem,
    /// States recorded per trajectory (M).
    pub steps: usize,
    pub dt: f64,
    /// Integration steps discarded before recording starts.
    pub burn_in: usize,
    pub init_lo: Vec<f64>,
    pub init_hi: Vec<f64>,
    /// Lorenz: event iff `max_m x(tau_m) > threshold`. FitzHugh-Nagumo:
    /// event iff the count of upward crossings of `v = 1` exceeds it.
    pub event_threshold: f64,
}

impl TrajectorySpec {
    pub fn lorenz() -> Self {
        TrajectorySpec {
            system: DynSystem::Lorenz,
            steps: 64,
            dt: 0.02,
            burn_in: 500,
            init_lo: vec![-15.0, -20.0, 5.0],
            init_hi: vec![15.0, 20.0, 40.0],
            event_threshold: 12.0,
        }
    }

    pub fn fhn() -> Self {
        TrajectorySpec {
            system: DynSystem::FitzHughNagumo,
            steps: 64,
            dt: 0.1,
            burn_in: 200,
            init_lo: vec![-2.0, -2.0],
            init_hi: vec![2.0, 2.0],
            event_threshold: 0.5,
        }
    }

    pub fn dim(&self) -> usize {
        self.system.dim()
    }

    pub fn flat_dim(&self) -> usize {
        self.steps * self.dim()
    }
}

/// Classic fourth-order Runge-Kutta step.
pub fn rk4_step(f: &dyn Fn(&[f64], &mut [f64]), state: &[f64], dt: f64) -> Vec<f64> {
    let d = state.len();
    let mut k1 = vec![0.0; d];
    let mut k2 = vec![0.0; d];
    let mut k3 = vec![0.0; d];
    let mut k4 = vec![0.0; d];
    let mut tmp = vec![0.0; d];
    f(state, &mut k1);
    for i in 0..d {
        tmp[i] = state[i] + 0.5 * dt * k1[i];
    }
    f(&tmp, &mut k2);
    for i in 0..d {
        tmp[i] = state[i] + 0.5 * dt * k2[i];
    }
    f(&tmp, &mut k3);
    for i in 0..d {
        tmp[i] = state[i] + dt * k3[i];
    }
    f(&tmp, &mut k4);
    (0..d)
        .map(|i| state[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// Integrates one trajectory from a random initial condition: burn-in steps
/// are discarded, then `steps` states are recorded as a `[M, d]` tensor.
pub fn integrate_trajectory(rng: &mut Rng, spec: &TrajectorySpec) -> Result<Tensor, FlowError> {
    let d = spec.dim();
    let mut state: Vec<f64> = (0..d).map(|i| rng.uniform_in(spec.init_lo[i], spec.init_hi[i])).collect();
    let f = |s: &[f64], out: &mut [f64]| spec.system.rhs(s, out);
    for _ in 0..spec.burn_in {
        state = rk4_step(&f, &state, spec.dt);
    }
    let mut data = Vec::with_capacity(spec.steps * d);
    for _ in 0..spec.steps {
        state = rk4_step(&f, &state, spec.dt);
        if state.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::Numeric(String::from("trajectory integration diverged")));
        }
        data.extend_from_slice(&state);
    }
    Ok(Tensor::from_vec(vec![spec.steps, d], data))
}

/// Event constraint on a flattened raw trajectory of length `steps * dim`.
pub fn event_indicator(spec: &TrajectorySpec, flat: &[f64]) -> bool {
    let d = spec.dim();
    assert_eq!(flat.len(), spec.flat_dim(), "trajectory length mismatch");
    match spec.system {
        DynSystem::Lorenz => {
            let max_x = flat.iter().step_by(d).cloned().fold(f64::NEG_INFINITY, f64::max);
            max_x > spec.event_threshold
        }
        DynSystem::FitzHughNagumo => {
            let mut crossings = 0usize;
            let mut prev = flat[0];
            for m in 1..spec.steps {
                let v = flat[m * d];
                if prev <= 1.0 && v > 1.0 {
                    crossings += 1;
                }
                prev = v;
            }
            crossings as f64 > spec.event_threshold
        }
    }
}

/// Materialized trajectory training set with its normalization statistics.
#[derive(Debug, Clone)]
pub struct TrajectoryDataset {
    pub spec: TrajectorySpec,
    /// Raw states, `[n, M*d]`.
    pub raw: Tensor,
    /// Per-system-coordinate mean over all rows and steps.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub events: Vec<bool>,
}

impl TrajectoryDataset {
    pub fn build(rng: &mut Rng, spec: &TrajectorySpec, n: usize) -> Result<Self, FlowError> {
        let d = spec.dim();
        let flat = spec.flat_dim();
        let mut data = Vec::with_capacity(n * flat);
        let mut events = Vec::with_capacity(n);
        for i in 0..n {
            let mut traj_rng = rng.split(i as u64);
            let traj = integrate_trajectory(&mut traj_rng, spec)?;
            events.push(event_indicator(spec, traj.data()));
            data.extend_from_slice(traj.data());
        }
        let raw = Tensor::from_vec(vec![n, flat], data);
        let (mean, std) = coordinate_stats(&raw, d);
        Ok(TrajectoryDataset { spec: spec.clone(), raw, mean, std, events })
    }

    pub fn len(&self) -> usize {
        self.raw.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.rows() == 0
    }

    /// Z-scores a `[n, M*d]` tensor of raw states with the stored stats.
    pub fn normalize(&self, raw: &Tensor) -> Tensor {
        apply_norm(raw, self.spec.dim(), &self.mean, &self.std, false)
    }

    /// Inverse of [`Self::normalize`].
    pub fn denormalize(&self, z: &Tensor) -> Tensor {
        apply_norm(z, self.spec.dim(), &self.mean, &self.std, true)
    }

    /// Context vector for one raw trajectory row: the event bit followed by
    /// the first three states, z-scored.
    pub fn context_of(&self, raw_row: &[f64], force_event: Option<bool>) -> Vec<f64> {
        let d = self.spec.dim();
        let event = force_event.unwrap_or_else(|| event_indicator(&self.spec, raw_row));
        let mut c = Vec::with_capacity(1 + 3 * d);
        c.push(if event { 1.0 } else { 0.0 });
        for m in 0..3 {
            for j in 0..d {
                c.push((raw_row[m * d + j] - self.mean[j]) / self.std[j]);
            }
        }
        c
    }

    pub fn ctx_dim(&self) -> usize {
        1 + 3 * self.spec.dim()
    }
}

fn coordinate_stats(raw: &Tensor, d: usize) -> (Vec<f64>, Vec<f64>) {
    let n = raw.len() / d;
    let mut mean = vec![0.0; d];
    for chunk in raw.data().chunks_exact(d) {
        for (m, &v) in mean.iter_mut().zip(chunk) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut var = vec![0.0; d];
    for chunk in raw.data().chunks_exact(d) {
        for j in 0..d {
            let c = chunk[j] - mean[j];
            var[j] += c * c;
        }
    }
    let std = var.iter().map(|v| crate::mathx::sqrt(v / n as f64).max(1e-12)).collect();
    (mean, std)
}

fn apply_norm(x: &Tensor, d: usize, mean: &[f64], std: &[f64], inverse: bool) -> Tensor {
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let j = i % d;
        if inverse {
            *v = *v * std[j] + mean[j];
        } else {
            *v = (*v - mean[j]) / std[j];
        }
    }
    out
}

/// Which experiment a run trains on.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum TaskSpec {
    Gmm(GmmSpec),
    Checkerboard(CheckerboardSpec),
    Trajectory { traj: TrajectorySpec, guided: bool, n_train: usize },
}

impl TaskSpec {
    pub fn name(&self) -> String {
        match self {
            TaskSpec::Gmm(_) => String::from("gmm"),
            TaskSpec::Checkerboard(_) => String::from("checkerboard"),
            TaskSpec::Trajectory { traj, guided, .. } => {
                let base = match traj.system {
                    DynSystem::Lorenz => "lorenz",
                    DynSystem::FitzHughNagumo => "fhn",
                };
                if *guided {
                    format!("{base}-guided")
                } else {
                    String::from(base)
                }
            }
        }
    }

    pub fn data_dim(&self) -> usize {
        match self {
            TaskSpec::Gmm(_) => 1,
            TaskSpec::Checkerboard(_) => 2,
            TaskSpec::Trajectory { traj, .. } => traj.flat_dim(),
        }
    }

    pub fn ctx_dim(&self) -> Option<usize> {
        match self {
            TaskSpec::Trajectory { traj, guided: true, .. } => Some(1 + 3 * traj.dim()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        match self {
            TaskSpec::Gmm(s) => s.validate(),
            TaskSpec::Checkerboard(s) => s.validate(),
            TaskSpec::Trajectory { traj, n_train, .. } => {
                if traj.steps < 3 {
                    return Err(FlowError::BadConfig("trajectory needs at least 3 steps for contexts"));
                }
                if *n_train == 0 {
                    return Err(FlowError::BadConfig("trajectory task needs training data"));
                }
                Ok(())
            }
        }
    }

    /// Materializes whatever the task needs before training (trajectory
    /// datasets); synthetic densities sample on the fly.
    pub fn prepare(&self, rng: &mut Rng) -> Result<PreparedTask, FlowError> {
        self.validate()?;
        let dataset = match self {
            TaskSpec::Trajectory { traj, n_train, .. } => {
                Some(TrajectoryDataset::build(rng, traj, *n_train)?)
            }
            _ => None,
        };
        Ok(PreparedTask { spec: self.clone(), dataset })
    }

    /// Rebuilds a prepared task from checkpointed normalization statistics
    /// without regenerating data (sampling/evaluation path).
    pub fn prepare_with_norm(&self, norm: Option<(Vec<f64>, Vec<f64>)>) -> Result<PreparedTask, FlowError> {
        self.validate()?;
        let dataset = match self {
            TaskSpec::Trajectory { traj, .. } => {
                let (mean, std) =
                    norm.ok_or(FlowError::BadConfig("trajectory task needs stored normalization stats"))?;
                Some(TrajectoryDataset {
                    spec: traj.clone(),
                    raw: Tensor::zeros(&[0, traj.flat_dim()]),
                    mean,
                    std,
                    events: Vec::new(),
                })
            }
            _ => None,
        };
        Ok(PreparedTask { spec: self.clone(), dataset })
    }
}

/// Task plus any materialized data, ready to serve training batches and
/// evaluation references.
#[derive(Debug, Clone)]
pub struct PreparedTask {
    pub spec: TaskSpec,
    dataset: Option<TrajectoryDataset>,
}

impl PreparedTask {
    pub fn dataset(&self) -> Option<&TrajectoryDataset> {
        self.dataset.as_ref()
    }

    pub fn norm(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        self.dataset.as_ref().map(|d| (d.mean.clone(), d.std.clone()))
    }

    /// One training batch: data in model space (z-scored for trajectories)
    /// plus contexts when the task is guided.
    pub fn draw(&self, rng: &mut Rng, batch: usize) -> (Tensor, Option<Tensor>) {
        match &self.spec {
            TaskSpec::Gmm(s) => (sample_gmm(rng, s, batch), None),
            TaskSpec::Checkerboard(s) => (sample_checkerboard(rng, s, batch), None),
            TaskSpec::Trajectory { guided, .. } => {
                let ds = self.dataset.as_ref().expect("trajectory task not prepared");
                assert!(!ds.is_empty(), "trajectory dataset has no rows to draw from");
                let flat = ds.spec.flat_dim();
                let mut data = Vec::with_capacity(batch * flat);
                let mut ctx = Vec::new();
                for _ in 0..batch {
                    let i = (rng.next_u64() % ds.len() as u64) as usize;
                    let row = ds.raw.row(i);
                    data.extend_from_slice(row);
                    if *guided {
                        ctx.extend_from_slice(&ds.context_of(row, Some(ds.events[i])));
                    }
                }
                let raw = Tensor::from_vec(vec![batch, flat], data);
                let x = ds.normalize(&raw);
                let contexts = if *guided {
                    Some(Tensor::from_vec(vec![batch, ds.ctx_dim()], ctx))
                } else {
                    None
                };
                (x, contexts)
            }
        }
    }

    /// Fresh reference samples in model space, independent of training draws.
    pub fn sample_reference(&self, rng: &mut Rng, n: usize) -> Result<Tensor, FlowError> {
        match &self.spec {
            TaskSpec::Gmm(s) => Ok(sample_gmm(rng, s, n)),
            TaskSpec::Checkerboard(s) => Ok(sample_checkerboard(rng, s, n)),
            TaskSpec::Trajectory { traj, .. } => {
                let ds = self.dataset.as_ref().expect("trajectory task not prepared");
                let flat = traj.flat_dim();
                let mut data = Vec::with_capacity(n * flat);
                for i in 0..n {
                    let mut traj_rng = rng.split(0x5eed ^ i as u64);
                    let t = integrate_trajectory(&mut traj_rng, traj)?;
                    data.extend_from_slice(t.data());
                }
                let raw = Tensor::from_vec(vec![n, flat], data);
                Ok(ds.normalize(&raw))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gmm_component_fractions_and_mean() {
        let spec = GmmSpec::default();
        spec.validate().unwrap();
        let mut rng = Rng::new(1);
        let n = 1_000_000;
        let xs = sample_gmm(&mut rng, &spec, n);
        // Analytic mixture mean is 0.05; mixture variance is 1.7875.
        let mean = xs.mean();
        let sd = (1.7875f64 / n as f64).sqrt();
        assert!((mean - 0.05).abs() < 3.0 * sd + 1e-9, "mean {mean}");
    }

    #[test]
    fn gmm_component_one_fraction() {
        // Draws above 1.0 come almost surely from the component at 1.5
        // (mass 0.35) plus a Phi(-2.5) sliver of the 0.5 component.
        let spec = GmmSpec::default();
        let mut rng = Rng::new(2);
        let n = 1_000_000;
        let xs = sample_gmm(&mut rng, &spec, n);
        let frac = xs.data().iter().filter(|&&x| x > 1.0).count() as f64 / n as f64;
        let expect = 0.35 * 0.99379 + 0.25 * 0.00621;
        let sd = (expect * (1.0 - expect) / n as f64).sqrt();
        assert!((frac - expect).abs() < 4.0 * sd, "frac {frac} expect {expect}");
    }

    #[test]
    fn gmm_degenerate_weights() {
        let spec = GmmSpec { weights: vec![1.0, 0.0, 0.0], ..GmmSpec::default() };
        let mut rng = Rng::new(3);
        let xs = sample_gmm(&mut rng, &spec, 50_000);
        let mean = xs.mean();
        assert!((mean - 1.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn gmm_density_integrates_to_one() {
        let spec = GmmSpec::default();
        let n = 20_001;
        let dx = 10.0 / (n - 1) as f64;
        let mut total = 0.0;
        for i in 0..n {
            let x = -5.0 + dx * i as f64;
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            total += w * spec.density(x) * dx;
        }
        assert!((total - 1.0).abs() < 1e-6, "integral {total}");
    }

    #[test]
    fn checkerboard_support_and_cell_counts() {
        let spec = CheckerboardSpec::default();
        spec.validate().unwrap();
        let mut rng = Rng::new(4);
        let n = 100_000;
        let xs = sample_checkerboard(&mut rng, &spec, n);
        let on = spec.on_cells();
        let mut counts = vec![0usize; on.len()];
        let w = spec.cell_width();
        for i in 0..n {
            let (x, y) = (xs.data()[2 * i], xs.data()[2 * i + 1]);
            assert!(spec.contains(x, y), "sample ({x}, {y}) off support");
            let ci = ((x + spec.extent) / w) as usize;
            let cj = ((y + spec.extent) / w) as usize;
            let idx = on.iter().position(|&c| c == (ci, cj)).unwrap();
            counts[idx] += 1;
        }
        let expect = n as f64 / on.len() as f64;
        let sd = (n as f64 * (1.0 / 8.0) * (7.0 / 8.0)).sqrt();
        for &c in &counts {
            assert!((c as f64 - expect).abs() < 4.0 * sd, "count {c} vs {expect}");
        }
    }

    #[test]
    fn checkerboard_two_by_two_is_diagonal() {
        let spec = CheckerboardSpec { extent: 1.0, cells: 2 };
        assert_eq!(spec.on_cells(), vec![(0, 0), (1, 1)]);
        let mut rng = Rng::new(5);
        let xs = sample_checkerboard(&mut rng, &spec, 10_000);
        for i in 0..10_000 {
            let (x, y) = (xs.data()[2 * i], xs.data()[2 * i + 1]);
            // Both coordinates land in the same diagonal cell.
            assert!((x < 0.0) == (y < 0.0), "({x}, {y})");
        }
    }

    #[test]
    fn rk4_is_fourth_order_on_exponential_decay() {
        // dx/dt = -x from 1.0 over one time unit; halving dt shrinks the
        // endpoint error ~16x.
        let f = |s: &[f64], out: &mut [f64]| out[0] = -s[0];
        let run = |dt: f64| {
            let mut state = vec![1.0];
            let n = (1.0 / dt) as usize;
            for _ in 0..n {
                state = rk4_step(&f, &state, dt);
            }
            (state[0] - crate::mathx::exp(-1.0)).abs()
        };
        let ratio = run(0.01) / run(0.005);
        assert!(ratio > 12.0 && ratio < 20.0, "ratio {ratio}");
    }

    #[test]
    fn zero_field_keeps_trajectory_constant() {
        let f = |_s: &[f64], out: &mut [f64]| out.fill(0.0);
        let state = vec![1.0, -2.0, 3.0];
        let next = rk4_step(&f, &state, 0.1);
        assert_eq!(next, state);
    }

    #[test]
    fn lorenz_trajectories_stay_bounded() {
        let spec = TrajectorySpec::lorenz();
        let mut rng = Rng::new(6);
        for i in 0..20 {
            let mut r = rng.split(i);
            let traj = integrate_trajectory(&mut r, &spec).unwrap();
            let max = traj.data().iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
            assert!(max < 100.0, "trajectory escaped: {max}");
        }
    }

    #[test]
    fn event_indicator_thresholds() {
        let mut spec = TrajectorySpec::lorenz();
        let mut rng = Rng::new(7);
        let traj = integrate_trajectory(&mut rng, &spec).unwrap();
        spec.event_threshold = f64::NEG_INFINITY;
        assert!(event_indicator(&spec, traj.data()));
        spec.event_threshold = f64::INFINITY;
        assert!(!event_indicator(&spec, traj.data()));

        // Hand-built FHN trajectory with exactly one upward crossing of v=1.
        let fhn = TrajectorySpec { steps: 4, event_threshold: 0.5, ..TrajectorySpec::fhn() };
        let flat = vec![0.0, 0.0, 1.5, 0.0, 0.8, 0.0, 0.9, 0.0];
        assert!(event_indicator(&fhn, &flat));
        let fhn2 = TrajectorySpec { event_threshold: 1.5, ..fhn };
        assert!(!event_indicator(&fhn2, &flat));
    }

    #[test]
    fn dataset_normalization_roundtrip_and_contexts() {
        let spec = TrajectorySpec { steps: 8, burn_in: 50, ..TrajectorySpec::lorenz() };
        let mut rng = Rng::new(8);
        let ds = TrajectoryDataset::build(&mut rng, &spec, 16).unwrap();
        assert_eq!(ds.raw.shape(), &[16, 24]);

        let z = ds.normalize(&ds.raw);
        let back = ds.denormalize(&z);
        for (a, b) in back.data().iter().zip(ds.raw.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        let mean = z.mean();
        assert!(mean.abs() < 0.2, "pooled mean {mean}");

        let ctx = ds.context_of(ds.raw.row(0), None);
        assert_eq!(ctx.len(), 10);
        assert!(ctx[0] == 0.0 || ctx[0] == 1.0);
        let forced = ds.context_of(ds.raw.row(0), Some(true));
        assert_eq!(forced[0], 1.0);
    }

    #[test]
    fn prepared_task_draw_shapes() {
        let mut rng = Rng::new(9);
        let gmm = TaskSpec::Gmm(GmmSpec::default()).prepare(&mut rng).unwrap();
        let (x, c) = gmm.draw(&mut rng, 32);
        assert_eq!(x.shape(), &[32, 1]);
        assert!(c.is_none());

        let spec = TrajectorySpec { steps: 4, burn_in: 20, ..TrajectorySpec::lorenz() };
        let task = TaskSpec::Trajectory { traj: spec, guided: true, n_train: 8 };
        let prepared = task.prepare(&mut rng).unwrap();
        let (x, c) = prepared.draw(&mut rng, 5);
        assert_eq!(x.shape(), &[5, 12]);
        assert_eq!(c.unwrap().shape(), &[5, 10]);
    }
}
