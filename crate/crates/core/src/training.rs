//! Losses, gradients, Hessian probes and projected gradient descent on `U`.
//!
//! Each task enters the objectives only through `(s_hat, phi_q, target)`, with
//! target `y = (1 + z_q)/2` for cross-entropy and `r = z_q / t_q` for regression.
//! With `v = phi_q ⊗ s_hat` (column-major `vec(U)`) the logit is `vec(U)^T v`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::attention::{bilinear, project_frobenius};
use crate::error::{check_dim, Error, Result};
use crate::model::{clamp_prob, logistic, LabelMode, PopulationSpec, TaskSample};
use crate::prompts::{label, label_weighted_mean};
use crate::rng::{tags, RngSeed};
use crate::synthgen::{generate_task, DdmConfig, TaskShape, ThetaSource};

/// Everything a task contributes to either loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSummary {
    pub s: DVector<f64>,
    pub q: DVector<f64>,
    pub target: f64,
}

impl TaskSummary {
    pub fn from_task(task: &TaskSample, mode: LabelMode) -> Result<Self> {
        let s = label_weighted_mean(task, mode)?;
        let target = match mode {
            LabelMode::Binary => 0.5 * (1.0 + task.query_truth.z),
            LabelMode::ResponseTime => label(&task.query_truth, mode)?,
        };
        Ok(Self {
            s,
            q: task.query.as_vector().clone(),
            target,
        })
    }

    pub fn logit(&self, u: &DMatrix<f64>) -> f64 {
        bilinear(&self.s, u, &self.q)
    }

    /// `phi_q ⊗ s_hat`.
    pub fn feature(&self) -> DVector<f64> {
        let d = self.s.len();
        DVector::from_fn(d * d, |idx, _| self.s[idx % d] * self.q[idx / d])
    }
}

/// Tasks per parallel reduction chunk; sums are combined in chunk order so the
/// result does not depend on the worker count.
const CHUNK: usize = 512;

/// Empirical loss over a fixed set of tasks.
#[derive(Debug, Clone)]
pub struct Objective {
    pub mode: LabelMode,
    pub dim: usize,
    pub tasks: Vec<TaskSummary>,
}

impl Objective {
    pub fn new(mode: LabelMode, tasks: Vec<TaskSummary>) -> Result<Self> {
        let first = tasks
            .first()
            .ok_or_else(|| Error::Data("objective over an empty task set".into()))?;
        let dim = first.s.len();
        for t in &tasks {
            check_dim(dim, t.s.len())?;
            check_dim(dim, t.q.len())?;
        }
        Ok(Self { mode, dim, tasks })
    }

    pub fn from_tasks(tasks: &[TaskSample], mode: LabelMode) -> Result<Self> {
        let summaries = tasks
            .par_iter()
            .map(|t| TaskSummary::from_task(t, mode))
            .collect::<Result<Vec<_>>>()?;
        Self::new(mode, summaries)
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    fn reduce<T, F, G>(&self, zero: T, map: F, add: G) -> T
    where
        T: Send + Sync + Clone,
        F: Fn(&TaskSummary) -> T + Sync,
        G: Fn(T, T) -> T + Sync,
    {
        let parts: Vec<T> = self
            .tasks
            .par_chunks(CHUNK)
            .map(|chunk| chunk.iter().fold(zero.clone(), |acc, t| add(acc, map(t))))
            .collect();
        parts.into_iter().fold(zero, add)
    }

    fn per_task_loss(&self, t: &TaskSummary, u: &DMatrix<f64>) -> f64 {
        let logit = t.logit(u);
        match self.mode {
            LabelMode::Binary => {
                let p = logistic(logit);
                -(t.target * clamp_prob(p).ln() + (1.0 - t.target) * clamp_prob(1.0 - p).ln())
            }
            LabelMode::ResponseTime => 0.5 * (logit - t.target).powi(2),
        }
    }

    /// Derivative of the per-task loss with respect to the logit.
    fn residual(&self, t: &TaskSummary, u: &DMatrix<f64>) -> f64 {
        let logit = t.logit(u);
        match self.mode {
            LabelMode::Binary => logistic(logit) - t.target,
            LabelMode::ResponseTime => logit - t.target,
        }
    }

    pub fn loss(&self, u: &DMatrix<f64>) -> Result<f64> {
        check_dim(self.dim, u.nrows())?;
        let total = self.reduce(0.0, |t| self.per_task_loss(t, u), |a, b| a + b);
        Ok(total / self.len() as f64)
    }

    pub fn grad(&self, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim(self.dim, u.nrows())?;
        let d = self.dim;
        let total = self.reduce(
            DMatrix::zeros(d, d),
            |t| &t.s * t.q.transpose() * self.residual(t, u),
            |a, b| a + b,
        );
        Ok(total / self.len() as f64)
    }

    /// `mean w v v^T` with `w = sigma(1 - sigma)` (cross-entropy) or `1` (regression).
    pub fn hessian(&self, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim(self.dim, u.nrows())?;
        let d2 = self.dim * self.dim;
        let total = self.reduce(
            DMatrix::zeros(d2, d2),
            |t| {
                let w = match self.mode {
                    LabelMode::Binary => {
                        let p = logistic(t.logit(u));
                        p * (1.0 - p)
                    }
                    LabelMode::ResponseTime => 1.0,
                };
                let v = t.feature();
                &v * v.transpose() * w
            },
            |a, b| a + b,
        );
        Ok(total / self.len() as f64)
    }

    /// Minimizer of the regression loss from its normal equations.
    pub fn fit_regression_closed_form(&self) -> Result<DMatrix<f64>> {
        if self.mode != LabelMode::ResponseTime {
            return Err(Error::ModeMismatch {
                expected: "response_time".into(),
                found: self.mode.to_string(),
            });
        }
        let d = self.dim;
        let d2 = d * d;
        let h = self.hessian(&DMatrix::zeros(d, d))?;
        let b = self.reduce(DVector::zeros(d2), |t| t.feature() * t.target, |a, b| a + b)
            / self.len() as f64;
        let x = h
            .cholesky()
            .ok_or_else(|| Error::Data("regression normal matrix is singular".into()))?
            .solve(&b);
        Ok(DMatrix::from_column_slice(d, d, x.as_slice()))
    }
}

fn objective_of(tasks: &[TaskSample], mode: LabelMode) -> Result<Objective> {
    Objective::from_tasks(tasks, mode)
}

pub fn loss_binary(u: &DMatrix<f64>, tasks: &[TaskSample]) -> Result<f64> {
    objective_of(tasks, LabelMode::Binary)?.loss(u)
}

pub fn loss_regression(u: &DMatrix<f64>, tasks: &[TaskSample]) -> Result<f64> {
    objective_of(tasks, LabelMode::ResponseTime)?.loss(u)
}

pub fn grad_binary(u: &DMatrix<f64>, tasks: &[TaskSample]) -> Result<DMatrix<f64>> {
    objective_of(tasks, LabelMode::Binary)?.grad(u)
}

pub fn grad_regression(u: &DMatrix<f64>, tasks: &[TaskSample]) -> Result<DMatrix<f64>> {
    objective_of(tasks, LabelMode::ResponseTime)?.grad(u)
}

/// Extreme eigenvalues of the vectorized Hessian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HessianProbe {
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    pub iterations: usize,
}

/// Assembles the `d^2 x d^2` Hessian and finds its extreme eigenvalues by power
/// iteration (largest) and inverse power iteration (smallest; shifted power
/// iteration when the matrix is not positive definite).
pub fn hessian_probe(u: &DMatrix<f64>, objective: &Objective) -> Result<HessianProbe> {
    let d2 = objective.dim * objective.dim;
    if objective.len() < 50 * d2 {
        return Err(Error::Config(format!(
            "Hessian probe needs at least 50 d^2 = {} tasks, got {}",
            50 * d2,
            objective.len()
        )));
    }
    let h = objective.hessian(u)?;
    probe_matrix(&h)
}

pub fn probe_matrix(h: &DMatrix<f64>) -> Result<HessianProbe> {
    let n = h.nrows();
    let asym = (h - h.transpose()).amax();
    if asym > 1e-10 * h.amax().max(1.0) {
        return Err(Error::Internal(format!(
            "assembled Hessian is not symmetric (max deviation {asym:e})"
        )));
    }
    let start = DVector::from_fn(n, |i, _| 1.0 + 0.01 * i as f64).normalize();
    let (max_eig, it1) = power_iteration(|x| h * x, start.clone());
    let (min_eig, it2) = match h.clone().cholesky() {
        Some(chol) => {
            let (inv, it) = power_iteration(|x| chol.solve(x), start);
            (1.0 / inv, it)
        }
        None => {
            let shifted = DMatrix::identity(n, n) * max_eig - h;
            let (top, it) = power_iteration(|x| &shifted * x, start);
            (max_eig - top, it)
        }
    };
    Ok(HessianProbe {
        min_eigenvalue: min_eig,
        max_eigenvalue: max_eig,
        iterations: it1 + it2,
    })
}

fn power_iteration<F: Fn(&DVector<f64>) -> DVector<f64>>(
    apply: F,
    mut x: DVector<f64>,
) -> (f64, usize) {
    let mut lambda = 0.0;
    for it in 1..=20_000 {
        let y = apply(&x);
        let norm = y.norm();
        if norm == 0.0 {
            return (0.0, it);
        }
        let next = x.dot(&y);
        x = y / norm;
        if it > 1 && (next - lambda).abs() <= 1e-13 * next.abs().max(1e-300) {
            return (next, it);
        }
        lambda = next;
    }
    (lambda, 20_000)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    Fixed(f64),
    /// `1 / L` with `L` the largest Hessian eigenvalue at the starting point.
    InverseSmoothness,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: LabelMode,
    /// Tasks per gradient estimate (fresh mode) or corpus size (fixed mode).
    pub batch_tasks: usize,
    pub step: StepRule,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub radius: f64,
    /// Draw a new batch every step; otherwise descend on one fixed corpus.
    pub fresh_tasks: bool,
    /// Held-out tasks used for stopping and the loss trace in fresh mode.
    pub holdout_tasks: usize,
    pub ddm: DdmConfig,
}

impl TrainConfig {
    pub fn new(mode: LabelMode, dim: usize) -> Self {
        Self {
            mode,
            batch_tasks: 4096,
            step: StepRule::InverseSmoothness,
            max_iters: 500,
            grad_tol: default_grad_tol(dim),
            radius: 100.0,
            fresh_tasks: true,
            holdout_tasks: 16384,
            ddm: DdmConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_tasks == 0 || (self.fresh_tasks && self.holdout_tasks == 0) {
            return Err(Error::Config("task counts must be positive".into()));
        }
        if let StepRule::Fixed(eta) = self.step {
            if !(eta >= 0.0 && eta.is_finite()) {
                return Err(Error::Config(format!(
                    "step size must be nonnegative, got {eta}"
                )));
            }
        }
        if !(self.radius > 0.0) {
            return Err(Error::Config("projection radius must be positive".into()));
        }
        if !(self.grad_tol > 0.0) {
            return Err(Error::Config("gradient tolerance must be positive".into()));
        }
        self.ddm.validate()
    }
}

/// `1e-4 * sqrt(d^2)`.
pub fn default_grad_tol(dim: usize) -> f64 {
    1e-4 * dim as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub u: DMatrix<f64>,
    /// Monitoring loss before the first step and after every step.
    pub loss_trace: Vec<f64>,
    pub grad_norm_trace: Vec<f64>,
    pub iterations: usize,
    pub projection_hits: usize,
    pub step_size: f64,
    pub converged: bool,
    /// The iterate never moved.
    pub no_progress: bool,
}

impl TrainReport {
    pub fn write_trace<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["iter", "loss", "grad_norm"])?;
        for (i, (l, g)) in self
            .loss_trace
            .iter()
            .zip(&self.grad_norm_trace)
            .enumerate()
        {
            w.write_record([i.to_string(), l.to_string(), g.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Summaries of `n` freshly generated tasks from stream `seed`.
pub fn generate_summaries(
    spec: &PopulationSpec,
    shape: &TaskShape,
    ddm: &DdmConfig,
    n: usize,
    seed: RngSeed,
) -> Result<Vec<TaskSummary>> {
    shape.validate()?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let task = generate_task(
                spec,
                shape,
                ThetaSource::InDist,
                ddm,
                &mut seed.substream(i as u64).rng(),
            )?;
            TaskSummary::from_task(&task, shape.mode)
        })
        .collect()
}

pub fn train(
    cfg: &TrainConfig,
    spec: &PopulationSpec,
    n_demos: usize,
    k: u32,
    seed: u64,
) -> Result<TrainReport> {
    train_from(
        cfg,
        spec,
        n_demos,
        k,
        seed,
        DMatrix::zeros(spec.dim, spec.dim),
    )
}

/// Projected gradient descent from `init`.
pub fn train_from(
    cfg: &TrainConfig,
    spec: &PopulationSpec,
    n_demos: usize,
    k: u32,
    seed: u64,
    init: DMatrix<f64>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let shape = TaskShape::new(n_demos, k, cfg.mode);
    let monitor = if cfg.fresh_tasks {
        generate_summaries(
            spec,
            &shape,
            &cfg.ddm,
            cfg.holdout_tasks,
            RngSeed::with_stream(seed, tags::HOLDOUT),
        )?
    } else {
        generate_summaries(
            spec,
            &shape,
            &cfg.ddm,
            cfg.batch_tasks,
            RngSeed::with_stream(seed, tags::CORPUS),
        )?
    };
    let monitor = Objective::new(cfg.mode, monitor)?;
    let train_stream = RngSeed::with_stream(seed, tags::TRAIN);
    descend(cfg, &monitor, init, |iter| {
        if cfg.fresh_tasks {
            let batch = generate_summaries(
                spec,
                &shape,
                &cfg.ddm,
                cfg.batch_tasks,
                train_stream.substream(iter as u64),
            )?;
            Ok(Some(Objective::new(cfg.mode, batch)?))
        } else {
            Ok(None)
        }
    })
}

/// Projected gradient descent on a fixed objective.
pub fn train_on(
    cfg: &TrainConfig,
    objective: &Objective,
    init: DMatrix<f64>,
) -> Result<TrainReport> {
    let fixed = TrainConfig {
        fresh_tasks: false,
        ..cfg.clone()
    };
    fixed.validate()?;
    descend(&fixed, objective, init, |_| Ok(None))
}

fn descend<F>(
    cfg: &TrainConfig,
    monitor: &Objective,
    init: DMatrix<f64>,
    mut batch: F,
) -> Result<TrainReport>
where
    F: FnMut(usize) -> Result<Option<Objective>>,
{
    let d = monitor.dim;
    if init.nrows() != d || init.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: init.nrows(),
        });
    }
    let mut u = init.clone();
    let mut projection_hits = usize::from(project_frobenius(&mut u, cfg.radius));
    let step_size = match cfg.step {
        StepRule::Fixed(eta) => eta,
        StepRule::InverseSmoothness => {
            // the cross-entropy Hessian is largest at U = 0, the regression Hessian is constant
            let probe = probe_matrix(&monitor.hessian(&DMatrix::zeros(d, d))?)?;
            if probe.max_eigenvalue <= 0.0 {
                return Err(Error::Data(
                    "loss has zero curvature; features or labels are degenerate".into(),
                ));
            }
            1.0 / probe.max_eigenvalue
        }
    };
    let initial = monitor.loss(&u)?;
    let mut g = monitor.grad(&u)?;
    let mut loss_trace = vec![initial];
    let mut grad_norm_trace = vec![g.norm()];
    let mut converged = g.norm() <= cfg.grad_tol;
    let mut iterations = 0;
    while !converged && iterations < cfg.max_iters {
        let step_grad = match batch(iterations)? {
            Some(obj) => obj.grad(&u)?,
            None => g.clone(),
        };
        u -= step_grad * step_size;
        if project_frobenius(&mut u, cfg.radius) {
            projection_hits += 1;
        }
        iterations += 1;
        let loss = monitor.loss(&u)?;
        if !loss.is_finite() || loss > 1e3 * initial.max(f64::MIN_POSITIVE) {
            return Err(Error::Diverged {
                iteration: iterations,
                loss,
                initial,
            });
        }
        g = monitor.grad(&u)?;
        loss_trace.push(loss);
        grad_norm_trace.push(g.norm());
        converged = g.norm() <= cfg.grad_tol;
    }
    let no_progress = u == init;
    Ok(TrainReport {
        u,
        loss_trace,
        grad_norm_trace,
        iterations,
        projection_hits,
        step_size,
        converged,
        no_progress,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Demonstration, FeatureDiff, Observation};
    use approx::assert_relative_eq;

    fn task(s_phi: &[f64], z: f64, t: f64, q: &[f64], zq: f64, tq: f64) -> TaskSample {
        TaskSample {
            theta: None,
            demos: vec![Demonstration {
                phi: FeatureDiff::new(s_phi.to_vec()),
                obs: Observation {
                    z,
                    t: Some(t),
                    k: 1,
                },
            }],
            query: FeatureDiff::new(q.to_vec()),
            query_truth: Observation {
                z: zq,
                t: Some(tq),
                k: 1,
            },
        }
    }

    #[test]
    fn binary_loss_values() {
        let tasks = vec![task(&[1.0, 0.5], 1.0, 0.3, &[0.2, -1.0], 1.0, 0.2)];
        assert_relative_eq!(
            loss_binary(&DMatrix::zeros(2, 2), &tasks).unwrap(),
            2f64.ln(),
            epsilon = 1e-15
        );
        let u = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -0.5, 3.0]);
        let logit =
            DVector::from_vec(vec![1.0, 0.5]).dot(&(&u * DVector::from_vec(vec![0.2, -1.0])));
        assert_relative_eq!(
            loss_binary(&u, &tasks).unwrap(),
            -logistic(logit).ln(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn regression_loss_values() {
        // s = 1, q = 1, U = 1 => o = 1; target z/t = 3
        let tasks = vec![task(&[1.0], 1.0, 1.0, &[1.0], 0.75, 0.25)];
        assert_relative_eq!(
            loss_regression(&DMatrix::from_element(1, 1, 1.0), &tasks).unwrap(),
            2.0,
            epsilon = 1e-14
        );
        let exact = vec![task(&[1.0], 1.0, 1.0, &[1.0], 1.0, 1.0)];
        assert_eq!(
            loss_regression(&DMatrix::from_element(1, 1, 1.0), &exact).unwrap(),
            0.0
        );
        assert_eq!(
            grad_regression(&DMatrix::from_element(1, 1, 1.0), &exact).unwrap()[(0, 0)],
            0.0
        );
    }

    #[test]
    fn binary_gradient_at_zero() {
        let tasks = vec![
            task(&[1.0, 0.5], 1.0, 0.3, &[0.2, -1.0], 1.0, 0.2),
            task(&[-0.4, 0.1], -1.0, 0.3, &[1.0, 2.0], -1.0, 0.2),
        ];
        let g = grad_binary(&DMatrix::zeros(2, 2), &tasks).unwrap();
        let mut expect = DMatrix::zeros(2, 2);
        for t in &tasks {
            let s = t.demos[0].phi.as_vector() * t.demos[0].obs.z;
            expect += &s * t.query.as_vector().transpose() * (-0.5 * t.query_truth.z);
        }
        assert_relative_eq!(g, expect / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn missing_query_time_is_an_error() {
        let mut t = task(&[1.0], 1.0, 1.0, &[1.0], 1.0, 1.0);
        t.query_truth.t = None;
        assert!(matches!(
            loss_regression(&DMatrix::zeros(1, 1), &[t]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn probe_matches_dense_eigensolver() {
        let a = DMatrix::from_fn(6, 6, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let h = &a * a.transpose() + DMatrix::identity(6, 6) * 0.1;
        let p = probe_matrix(&h).unwrap();
        let eig = h.clone().symmetric_eigen().eigenvalues;
        assert_relative_eq!(p.max_eigenvalue, eig.max(), max_relative = 1e-9);
        assert_relative_eq!(p.min_eigenvalue, eig.min(), max_relative = 1e-6);
        let indefinite = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, -1.0, 0.5]));
        let q = probe_matrix(&indefinite).unwrap();
        assert_relative_eq!(q.min_eigenvalue, -1.0, max_relative = 1e-6);
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(matches!(probe_matrix(&asym), Err(Error::Internal(_))));
    }

    #[test]
    fn zero_step_makes_no_progress() {
        let spec = PopulationSpec::desk_default(2).unwrap();
        let cfg = TrainConfig {
            step: StepRule::Fixed(0.0),
            max_iters: 3,
            fresh_tasks: false,
            batch_tasks: 256,
            ..TrainConfig::new(LabelMode::Binary, 2)
        };
        let r = train(&cfg, &spec, 4, 1, 1).unwrap();
        assert!(r.no_progress);
        assert_eq!(r.u, DMatrix::zeros(2, 2));
    }

    #[test]
    fn large_step_diverges() {
        let spec = PopulationSpec::desk_default(2).unwrap();
        let cfg = TrainConfig {
            step: StepRule::Fixed(1e3),
            max_iters: 20,
            fresh_tasks: false,
            batch_tasks: 256,
            ..TrainConfig::new(LabelMode::ResponseTime, 2)
        };
        assert!(matches!(
            train(&cfg, &spec, 8, 4, 1),
            Err(Error::Diverged { .. })
        ));
    }
}
