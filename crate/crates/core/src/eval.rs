//! Experiment harnesses: in-distribution and out-of-distribution accuracy,
//! convergence-rate sweeps, ratio-estimator concentration and report tables.

use std::fmt::Write as _;
use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;

use crate::attention::{forward_logit, predict_binary, AttentionParams};
use crate::error::{Error, Result};
use crate::model::{LabelMode, PopulationSpec, TaskSample};
use crate::numerics::{fit_loglog, LineFit};
use crate::oracles::{
    binary_finite_n_minimizer_1d, binary_population_minimizer_1d, closed_form_second_moment,
    feature_second_moment, population_minimizer_rt, BinaryThetaLaw, RtMoments,
};
use crate::prompts::{build_prompt, label_weighted_mean};
use crate::rng::{tags, RngSeed};
use crate::synthgen::{
    ddm_choice_prob, ddm_expected_time, generate_task, sample_aggregate, sample_first_passage,
    DdmConfig, TaskShape, ThetaSource,
};

/// Margins below this are treated as ties and excluded from accuracy.
pub const MARGIN_EPS: f64 = 1e-9;

/// What a prediction is scored against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalTruth {
    /// `sign(phi_q^T theta)`, the most likely choice.
    BayesSign,
    /// The sign of the recorded query choice.
    SampledLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// In-context demonstrations per task.
    pub m_demos: usize,
    pub k: u32,
    pub n_tasks: usize,
    pub truth: EvalTruth,
    pub ddm: DdmConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionRecord {
    pub task: usize,
    pub source: ThetaSource,
    /// Readout of the query label cell.
    pub output: f64,
    pub prediction: f64,
    /// `None` when the margin is below [`MARGIN_EPS`].
    pub truth: Option<f64>,
}

/// Accuracy of one split with its binomial 95% radius `1.96 sqrt(p(1-p)/n)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitAccuracy {
    pub accuracy: f64,
    pub n_scored: usize,
    pub n_excluded: usize,
    pub ci_radius: f64,
}

impl SplitAccuracy {
    fn from_records(records: &[PredictionRecord]) -> Self {
        let scored: Vec<_> = records
            .iter()
            .filter_map(|r| r.truth.map(|t| (r.prediction, t)))
            .collect();
        let n = scored.len();
        let correct = scored.iter().filter(|(p, t)| p == t).count();
        let accuracy = if n == 0 {
            0.0
        } else {
            correct as f64 / n as f64
        };
        let ci_radius = if n == 0 {
            0.0
        } else {
            1.96 * (accuracy * (1.0 - accuracy) / n as f64).sqrt()
        };
        Self {
            accuracy,
            n_scored: n,
            n_excluded: records.len() - n,
            ci_radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mode: LabelMode,
    pub m_demos: usize,
    pub k: u32,
    pub id: SplitAccuracy,
    pub ood: SplitAccuracy,
    pub records: Vec<PredictionRecord>,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Predicted choice: the binary rule, or the sign of the regression output
/// (zero resolves to `-1` in both).
pub fn predict_choice(
    params: &AttentionParams,
    task: &TaskSample,
    mode: LabelMode,
) -> Result<(f64, f64)> {
    let prompt = build_prompt(task, mode)?;
    match mode {
        LabelMode::Binary => {
            let out = forward_logit(params, &prompt)?;
            let (_, z) = predict_binary(params, &prompt)?;
            Ok((out, z))
        }
        LabelMode::ResponseTime => {
            let out = forward_logit(params, &prompt)?;
            Ok((out, sign(out)))
        }
    }
}

fn truth_of(task: &TaskSample, truth: EvalTruth) -> Result<Option<f64>> {
    match truth {
        EvalTruth::BayesSign => {
            let m = task.query_logit().ok_or_else(|| {
                Error::Data("Bayes-sign scoring needs the task's reward parameter".into())
            })?;
            Ok((m.abs() >= MARGIN_EPS).then(|| sign(m)))
        }
        EvalTruth::SampledLabel => {
            let z = task.query_truth.z;
            Ok((z.abs() >= MARGIN_EPS).then(|| sign(z)))
        }
    }
}

/// Scores `params` on given tasks.
pub fn eval_tasks(
    params: &AttentionParams,
    tasks: &[TaskSample],
    mode: LabelMode,
    truth: EvalTruth,
    source: ThetaSource,
) -> Result<(SplitAccuracy, Vec<PredictionRecord>)> {
    let records = tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let (output, prediction) = predict_choice(params, task, mode)?;
            Ok(PredictionRecord {
                task: i,
                source,
                output,
                prediction,
                truth: truth_of(task, truth)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((SplitAccuracy::from_records(&records), records))
}

fn eval_split(
    params: &AttentionParams,
    spec: &PopulationSpec,
    mode: LabelMode,
    cfg: &EvalConfig,
    source: ThetaSource,
    seed: u64,
) -> Result<(SplitAccuracy, Vec<PredictionRecord>)> {
    let shape = TaskShape::new(cfg.m_demos, cfg.k, mode);
    shape.validate()?;
    let stream = RngSeed::with_stream(
        seed,
        if source == ThetaSource::InDist {
            tags::EVAL_ID
        } else {
            tags::EVAL_OOD
        },
    );
    let records = (0..cfg.n_tasks)
        .into_par_iter()
        .map(|i| {
            let task = generate_task(
                spec,
                &shape,
                source,
                &cfg.ddm,
                &mut stream.substream(i as u64).rng(),
            )?;
            let (output, prediction) = predict_choice(params, &task, mode)?;
            Ok(PredictionRecord {
                task: i,
                source,
                output,
                prediction,
                truth: truth_of(&task, cfg.truth)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((SplitAccuracy::from_records(&records), records))
}

/// Accuracy on fresh in-distribution and out-of-distribution tasks; both splits
/// run through the same code and differ only in where `theta` is drawn.
pub fn eval_accuracy(
    params: &AttentionParams,
    spec: &PopulationSpec,
    mode: LabelMode,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<EvalReport> {
    if cfg.n_tasks == 0 {
        return Err(Error::Config("evaluation needs at least one task".into()));
    }
    let (id, mut records) = eval_split(params, spec, mode, cfg, ThetaSource::InDist, seed)?;
    let (ood, ood_records) = eval_split(params, spec, mode, cfg, ThetaSource::Ood, seed)?;
    records.extend(ood_records);
    Ok(EvalReport {
        mode,
        m_demos: cfg.m_demos,
        k: if mode == LabelMode::Binary { 1 } else { cfg.k },
        id,
        ood,
        records,
    })
}

/// The swept quantity and the error it measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateVariable {
    /// `‖U_{N,K} - Sigma^{-1}‖_F` over `N` at fixed `K`.
    ResponseTimeN,
    /// `‖U_{N,K} - Sigma^{-1}‖_F` over `K` at fixed `N`.
    ResponseTimeK,
    /// `E(o_hat - 2 theta^T phi_q)^2` at `U = Sigma^{-1}` over `M`, for out-of-distribution types.
    PredictionM,
    /// `|U_N - U_bar|` for the exact binary minimizer in the one-dimensional setup.
    BinaryN,
}

impl RateVariable {
    pub fn name(&self) -> &'static str {
        match self {
            RateVariable::ResponseTimeN => "rt_n",
            RateVariable::ResponseTimeK => "rt_k",
            RateVariable::PredictionM => "prediction_m",
            RateVariable::BinaryN => "binary_n",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "rt_n" | "n" => Ok(RateVariable::ResponseTimeN),
            "rt_k" | "k" => Ok(RateVariable::ResponseTimeK),
            "prediction_m" | "m" => Ok(RateVariable::PredictionM),
            "binary_n" => Ok(RateVariable::BinaryN),
            other => Err(Error::Config(format!("unknown rate variable `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateConfig {
    pub spec: PopulationSpec,
    /// `N` when it is not swept.
    pub fixed_n: usize,
    /// `K` when it is not swept.
    pub fixed_k: u32,
    /// Types sampled for the moment estimates.
    pub n_theta: usize,
    /// Replications per grid point for the prediction sweep.
    pub replications: usize,
    pub ddm: DdmConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    pub variable: String,
    pub grid: Vec<f64>,
    pub errors: Vec<f64>,
    /// `None` when the errors are identically zero.
    pub fit: Option<LineFit>,
}

impl RateReport {
    fn fitted(variable: &str, grid: Vec<f64>, errors: Vec<f64>) -> Result<Self> {
        let finite = errors.iter().filter(|e| e.is_finite() && **e > 0.0).count();
        if finite < 4 {
            return Err(Error::Report(format!(
                "rate fit needs at least 4 positive finite errors, got {finite}"
            )));
        }
        let fit = fit_loglog(&grid, &errors)?;
        Ok(Self {
            variable: variable.to_string(),
            grid,
            errors,
            fit: Some(fit),
        })
    }

    pub fn slope(&self) -> Option<f64> {
        self.fit.map(|f| f.slope)
    }

    /// Slope within `target ± tol`.
    pub fn within(&self, target: f64, tol: f64) -> bool {
        self.slope().is_some_and(|s| (s - target).abs() <= tol)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["variable", "value", "error", "slope", "slope_se"])?;
        let (slope, se) = self
            .fit
            .map(|f| (f.slope.to_string(), f.slope_se.to_string()))
            .unwrap_or_default();
        for (x, e) in self.grid.iter().zip(&self.errors) {
            w.write_record([
                self.variable.clone(),
                x.to_string(),
                e.to_string(),
                slope.clone(),
                se.clone(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn validate_grid(grid: &[usize]) -> Result<()> {
    if grid.len() < 4 {
        return Err(Error::Config(format!(
            "rate grid needs at least 4 points, got {}",
            grid.len()
        )));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) || grid[0] == 0 {
        return Err(Error::Config(
            "rate grid must be positive and strictly increasing".into(),
        ));
    }
    Ok(())
}

fn second_moment(spec: &PopulationSpec, seed: u64) -> Result<DMatrix<f64>> {
    match closed_form_second_moment(spec) {
        Some(m) => Ok(m),
        None => Ok(feature_second_moment(
            spec,
            &mut RngSeed::with_stream(seed, tags::MOMENTS).rng(),
        )?
        .matrix),
    }
}

/// Measures the error at each grid value and fits its log-log slope.
pub fn rate_sweep(
    variable: RateVariable,
    grid: &[usize],
    cfg: &RateConfig,
    seed: u64,
) -> Result<RateReport> {
    validate_grid(grid)?;
    let xs: Vec<f64> = grid.iter().map(|&g| g as f64).collect();
    let moments_seed = RngSeed::with_stream(seed, tags::MOMENTS);
    let errors: Vec<f64> = match variable {
        RateVariable::ResponseTimeN => {
            let sigma = second_moment(&cfg.spec, seed)?;
            let m = RtMoments::estimate(
                &cfg.spec,
                cfg.fixed_k,
                &cfg.ddm,
                cfg.n_theta,
                sigma,
                moments_seed,
            )?;
            grid.iter()
                .map(|&n| Ok(m.deviation(n)?.norm()))
                .collect::<Result<_>>()?
        }
        RateVariable::ResponseTimeK => {
            let sigma = second_moment(&cfg.spec, seed)?;
            grid.iter()
                .map(|&k| {
                    let k = u32::try_from(k).map_err(|_| Error::Config("K out of range".into()))?;
                    let m = RtMoments::estimate(
                        &cfg.spec,
                        k,
                        &cfg.ddm,
                        cfg.n_theta,
                        sigma.clone(),
                        moments_seed,
                    )?;
                    Ok(m.deviation(cfg.fixed_n)?.norm())
                })
                .collect::<Result<_>>()?
        }
        RateVariable::PredictionM => {
            let sigma = second_moment(&cfg.spec, seed)?;
            let u = population_minimizer_rt(&sigma)?;
            grid.iter()
                .map(|&m| {
                    prediction_error(
                        &cfg.spec,
                        &u,
                        &sigma,
                        m,
                        cfg.fixed_k,
                        cfg.replications,
                        &cfg.ddm,
                        moments_seed.substream(m as u64),
                    )
                })
                .collect::<Result<_>>()?
        }
        RateVariable::BinaryN => {
            let limit = binary_population_minimizer_1d(&BinaryThetaLaw::Uniform)?.root;
            grid.iter()
                .map(|&n| Ok((binary_finite_n_minimizer_1d(n)?.root - limit).abs()))
                .collect::<Result<_>>()?
        }
    };
    RateReport::fitted(variable.name(), xs, errors)
}

/// Mean over out-of-distribution types of `E_q[(o_hat - 2 theta^T phi_q)^2]`,
/// integrated over the query in closed form: with `e = U^T s_hat - 2 theta`
/// the inner expectation is `e^T Sigma e`.
#[allow(clippy::too_many_arguments)]
pub fn prediction_error(
    spec: &PopulationSpec,
    u: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    m: usize,
    k: u32,
    replications: usize,
    ddm: &DdmConfig,
    seed: RngSeed,
) -> Result<f64> {
    if replications == 0 {
        return Err(Error::Config(
            "prediction error needs at least one replication".into(),
        ));
    }
    let shape = TaskShape::new(m, k, LabelMode::ResponseTime);
    let parts = (0..replications)
        .into_par_iter()
        .map(|i| {
            let task = generate_task(
                spec,
                &shape,
                ThetaSource::Ood,
                ddm,
                &mut seed.substream(i as u64).rng(),
            )?;
            let s = label_weighted_mean(&task, LabelMode::ResponseTime)?;
            let theta = task.theta.as_ref().expect("synthetic task").as_vector();
            let e = u.transpose() * s - theta * 2.0;
            Ok(e.dot(&(sigma * &e)))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(parts.iter().sum::<f64>() / replications as f64)
}

/// Paired samples for the ratio-estimator concentration test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RatioPair {
    /// `X = a + Exp(mean b)`, `Y = c + Exp(mean e)`, independent.
    ShiftedExponential {
        x_shift: f64,
        x_scale: f64,
        y_shift: f64,
        y_scale: f64,
    },
    /// `X = Y = c + Exp(mean e)` from one stream.
    Identical { shift: f64, scale: f64 },
    /// `X = z`, `Y = t` of one drift-diffusion trial.
    Ddm { drift: f64 },
}

impl RatioPair {
    fn means(&self) -> (f64, f64) {
        match *self {
            RatioPair::ShiftedExponential {
                x_shift,
                x_scale,
                y_shift,
                y_scale,
            } => (x_shift + x_scale, y_shift + y_scale),
            RatioPair::Identical { shift, scale } => (shift + scale, shift + scale),
            RatioPair::Ddm { drift } => {
                (2.0 * ddm_choice_prob(drift) - 1.0, ddm_expected_time(drift))
            }
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(f64, f64)> {
        let exp = |scale: f64, rng: &mut R| -> Result<f64> {
            Ok(Exp::new(1.0 / scale)
                .map_err(|e| Error::Config(format!("exponential: {e}")))?
                .sample(rng))
        };
        match *self {
            RatioPair::ShiftedExponential {
                x_shift,
                x_scale,
                y_shift,
                y_scale,
            } => Ok((x_shift + exp(x_scale, rng)?, y_shift + exp(y_scale, rng)?)),
            RatioPair::Identical { shift, scale } => {
                let v = shift + exp(scale, rng)?;
                Ok((v, v))
            }
            RatioPair::Ddm { drift } => sample_first_passage(drift, 1, rng),
        }
    }
}

/// `E(X_bar / Y_bar - mu_X / mu_Y)^2` over `replications` outer draws per grid value.
pub fn ratio_concentration_test(
    pair: &RatioPair,
    grid: &[usize],
    replications: usize,
    seed: u64,
) -> Result<RateReport> {
    validate_grid(grid)?;
    let (mx, my) = pair.means();
    if my.abs() < 0.1 {
        return Err(Error::Config(format!("|mu_Y| = {} is below 0.1", my.abs())));
    }
    if replications == 0 {
        return Err(Error::Config("need at least one replication".into()));
    }
    let target = mx / my;
    let base = RngSeed::with_stream(seed, tags::SWEEP);
    let errors: Vec<f64> = grid
        .iter()
        .map(|&n| {
            let sq = (0..replications)
                .into_par_iter()
                .map(|r| {
                    let mut rng = base.substream(n as u64).substream(r as u64).rng();
                    let (mut sx, mut sy) = (0.0, 0.0);
                    for _ in 0..n {
                        let (x, y) = pair.draw(&mut rng)?;
                        sx += x;
                        sy += y;
                    }
                    Ok((sx / sy - target).powi(2))
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(sq.iter().sum::<f64>() / replications as f64)
        })
        .collect::<Result<_>>()?;
    let xs: Vec<f64> = grid.iter().map(|&g| g as f64).collect();
    if errors.iter().all(|&e| e == 0.0) {
        return Ok(RateReport {
            variable: "ratio".into(),
            grid: xs,
            errors,
            fit: None,
        });
    }
    RateReport::fitted("ratio", xs, errors)
}

/// Sample-level check of `v = (1/2) E[z] / E[t]` with a delta-method standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyIdentityCheck {
    pub drift: f64,
    pub estimate: f64,
    pub se: f64,
}

pub fn key_identity_check<R: Rng + ?Sized>(
    drift: f64,
    n: usize,
    ddm: &DdmConfig,
    rng: &mut R,
) -> Result<KeyIdentityCheck> {
    if n < 2 {
        return Err(Error::Config("need at least two simulations".into()));
    }
    let (mut sz, mut st, mut szz, mut stt, mut szt) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for _ in 0..n {
        let (z, t) = sample_aggregate(drift, 1, ddm, rng)?;
        sz += z;
        st += t;
        szz += z * z;
        stt += t * t;
        szt += z * t;
    }
    let nf = n as f64;
    let (mz, mt) = (sz / nf, st / nf);
    let c = nf / (nf - 1.0);
    let (vz, vt, czt) = (
        (szz / nf - mz * mz) * c,
        (stt / nf - mt * mt) * c,
        (szt / nf - mz * mt) * c,
    );
    let r = mz / mt;
    // Var(mz/mt) ≈ (vz - 2 r czt + r^2 vt) / (n mt^2)
    let var = (vz - 2.0 * r * czt + r * r * vt) / (nf * mt * mt);
    Ok(KeyIdentityCheck {
        drift,
        estimate: 0.5 * r,
        se: 0.5 * var.max(0.0).sqrt(),
    })
}

/// The mode × split accuracy table in text and CSV form.
#[derive(Debug, Clone, PartialEq)]
pub struct TableReport {
    pub text: String,
    pub csv: String,
    pub is_empty: bool,
}

const TABLE_HEADER: [&str; 8] = [
    "mode",
    "split",
    "accuracy",
    "ci_radius",
    "n_scored",
    "n_excluded",
    "m",
    "k",
];

pub fn table_report(reports: &[EvalReport]) -> Result<TableReport> {
    let mut text = String::new();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TABLE_HEADER)?;
    if reports.is_empty() {
        text.push_str("no data: no evaluation reports\n");
        let csv = String::from_utf8(w.into_inner().map_err(|e| Error::Report(e.to_string()))?)
            .map_err(|e| Error::Report(e.to_string()))?;
        return Ok(TableReport {
            text,
            csv,
            is_empty: true,
        });
    }
    writeln!(
        text,
        "{:<16} {:>4} {:>4} {:>18} {:>18}",
        "mode", "M", "K", "ID", "OOD"
    )
    .unwrap();
    for r in reports {
        let cell = |s: &SplitAccuracy| format!("{:.3} ± {:.3}", s.accuracy, s.ci_radius);
        writeln!(
            text,
            "{:<16} {:>4} {:>4} {:>18} {:>18}",
            r.mode.as_str(),
            r.m_demos,
            r.k,
            cell(&r.id),
            cell(&r.ood)
        )
        .unwrap();
        for (split, s) in [("id", &r.id), ("ood", &r.ood)] {
            w.write_record([
                r.mode.as_str().to_string(),
                split.to_string(),
                s.accuracy.to_string(),
                s.ci_radius.to_string(),
                s.n_scored.to_string(),
                s.n_excluded.to_string(),
                r.m_demos.to_string(),
                r.k.to_string(),
            ])?;
        }
    }
    let csv = String::from_utf8(w.into_inner().map_err(|e| Error::Report(e.to_string()))?)
        .map_err(|e| Error::Report(e.to_string()))?;
    Ok(TableReport {
        text,
        csv,
        is_empty: false,
    })
}

/// One row of the accuracy table CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub mode: LabelMode,
    pub split: String,
    pub accuracy: SplitAccuracy,
    pub m: usize,
    pub k: u32,
}

pub fn parse_table_csv<R: Read>(reader: R) -> Result<Vec<TableRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let bad = |what: &str| Error::Parse {
            line,
            message: format!("bad {what}"),
        };
        rows.push(TableRow {
            mode: rec[0].parse()?,
            split: rec[1].to_string(),
            accuracy: SplitAccuracy {
                accuracy: rec[2].parse().map_err(|_| bad("accuracy"))?,
                ci_radius: rec[3].parse().map_err(|_| bad("ci_radius"))?,
                n_scored: rec[4].parse().map_err(|_| bad("n_scored"))?,
                n_excluded: rec[5].parse().map_err(|_| bad("n_excluded"))?,
            },
            m: rec[6].parse().map_err(|_| bad("m"))?,
            k: rec[7].parse().map_err(|_| bad("k"))?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(mode: LabelMode, id: f64, ood: f64) -> EvalReport {
        let s = |a: f64| SplitAccuracy {
            accuracy: a,
            n_scored: 100,
            n_excluded: 1,
            ci_radius: 1.96 * (a * (1.0 - a) / 100.0).sqrt(),
        };
        EvalReport {
            mode,
            m_demos: 32,
            k: 32,
            id: s(id),
            ood: s(ood),
            records: Vec::new(),
        }
    }

    #[test]
    fn table_has_four_cells_and_round_trips() {
        let t = table_report(&[
            report(LabelMode::Binary, 0.9, 0.8),
            report(LabelMode::ResponseTime, 0.91, 0.9),
        ])
        .unwrap();
        assert!(!t.is_empty);
        assert_eq!(t.text.lines().count(), 3);
        let rows = parse_table_csv(t.csv.as_bytes()).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[1].split, "ood");
        assert_eq!(rows[1].accuracy, report(LabelMode::Binary, 0.9, 0.8).ood);
        assert_eq!(rows[3].mode, LabelMode::ResponseTime);
    }

    #[test]
    fn empty_table() {
        let t = table_report(&[]).unwrap();
        assert!(t.is_empty);
        assert!(t.text.contains("no data"));
    }

    #[test]
    fn zero_params_are_uninformed() {
        let spec = PopulationSpec::desk_default(3).unwrap();
        let params = AttentionParams::zeros(3, 1.0).unwrap();
        let cfg = EvalConfig {
            m_demos: 8,
            k: 4,
            n_tasks: 2000,
            truth: EvalTruth::BayesSign,
            ddm: DdmConfig::default(),
        };
        let r = eval_accuracy(&params, &spec, LabelMode::Binary, &cfg, 3).unwrap();
        for s in [r.id, r.ood] {
            assert!((s.accuracy - 0.5).abs() < 2.0 * s.ci_radius + 0.01, "{s:?}");
        }
        assert!(r.records.iter().all(|x| x.prediction == -1.0));
    }

    #[test]
    fn oracle_params_are_accurate() {
        let spec = PopulationSpec::desk_default(5).unwrap();
        let sigma = closed_form_second_moment(&spec).unwrap();
        let params = AttentionParams::new(population_minimizer_rt(&sigma).unwrap(), 100.0).unwrap();
        let cfg = EvalConfig {
            m_demos: 256,
            k: 64,
            n_tasks: 1000,
            truth: EvalTruth::BayesSign,
            ddm: DdmConfig::default(),
        };
        let r = eval_accuracy(&params, &spec, LabelMode::ResponseTime, &cfg, 4).unwrap();
        assert!(
            r.id.accuracy >= 0.95 && r.ood.accuracy >= 0.95,
            "{:?} {:?}",
            r.id,
            r.ood
        );
    }

    #[test]
    fn grid_validation() {
        let pair = RatioPair::ShiftedExponential {
            x_shift: 0.5,
            x_scale: 0.5,
            y_shift: 1.0,
            y_scale: 1.0,
        };
        assert!(matches!(
            ratio_concentration_test(&pair, &[4, 8], 10, 1),
            Err(Error::Config(_))
        ));
        assert!(ratio_concentration_test(&pair, &[8, 4, 16, 32], 10, 1).is_err());
        let small = RatioPair::ShiftedExponential {
            x_shift: 0.5,
            x_scale: 0.5,
            y_shift: 0.0,
            y_scale: 0.05,
        };
        assert!(ratio_concentration_test(&small, &[4, 8, 16, 32], 10, 1).is_err());
    }

    #[test]
    fn identical_streams_have_zero_error() {
        let pair = RatioPair::Identical {
            shift: 1.0,
            scale: 1.0,
        };
        let r = ratio_concentration_test(&pair, &[4, 8, 16, 32], 200, 2).unwrap();
        assert!(r.errors.iter().all(|&e| e == 0.0));
        assert!(r.fit.is_none());
    }

    #[test]
    fn key_identity_small_sample() {
        let mut rng = RngSeed::new(5).rng();
        let c = key_identity_check(1.0, 50_000, &DdmConfig::default(), &mut rng).unwrap();
        assert!((c.estimate - 1.0).abs() < 4.0 * c.se, "{c:?}");
    }
}
