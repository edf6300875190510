use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use icra_core::attention::{load_params, save_params, AttentionParams};
use icra_core::eval::{
    eval_accuracy, eval_tasks, rate_sweep, ratio_concentration_test, table_report, EvalConfig,
    EvalReport, EvalTruth, RateConfig, RateReport, RateVariable, RatioPair, SplitAccuracy,
};
use icra_core::ingest::{build_real_tasks, load_trials, SplitSpec};
use icra_core::oracles::{
    binary_population_minimizer_1d, closed_form_second_moment, counterexample_ustar,
    feature_second_moment, impossibility_gap, population_minimizer_rt, write_impossibility_csv,
    BinaryThetaLaw,
};
use icra_core::rng::{tags, RngSeed};
use icra_core::synthgen::io::{write_metadata, write_tasks};
use icra_core::synthgen::{generate_tasks, TaskShape, ThetaSource};
use icra_core::training::{train_from, TrainReport};
use icra_core::LabelMode;
use nalgebra::DMatrix;

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::svg::{bar_chart, line_chart, Series};

pub struct Context {
    pub cfg: ExperimentConfig,
    pub params: Vec<PathBuf>,
    pub strict: bool,
}

impl Context {
    fn seed(&self) -> Result<u64, CliError> {
        self.cfg.seed.ok_or_else(|| {
            CliError::Config("a seed is required (--seed or `seed =` in the config)".into())
        })
    }

    fn out(&self, name: &str) -> Result<PathBuf, CliError> {
        fs::create_dir_all(&self.cfg.out)
            .map_err(|e| CliError::Io(format!("cannot create {}: {e}", self.cfg.out.display())))?;
        Ok(self.cfg.out.join(name))
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<fs::File, CliError> {
    fs::File::create(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn generate(ctx: &Context, console: &mut dyn Write) -> Result<(), CliError> {
    let seed = ctx.seed()?;
    let c = &ctx.cfg;
    let shape = TaskShape::new(c.n, c.k, c.mode);
    let tasks = generate_tasks(
        &c.spec,
        &shape,
        c.source,
        &c.ddm,
        c.n_tasks,
        RngSeed::with_stream(seed, tags::CORPUS),
    )?;
    let path = ctx.out("tasks.csv")?;
    write_tasks(&path, &tasks)?;
    let meta: Vec<(String, String)> = [
        ("seed", seed.to_string()),
        ("mode", c.mode.to_string()),
        ("dim", c.dim.to_string()),
        ("n_demos", c.n.to_string()),
        ("k", shape_k(c).to_string()),
        ("n_tasks", c.n_tasks.to_string()),
        ("source", c.source.as_str().to_string()),
        ("ddm_method", format!("{:?}", c.ddm.method).to_lowercase()),
        ("ddm_dt", c.ddm.dt.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    write_metadata(&ctx.out("tasks.meta")?, &meta)?;
    writeln!(console, "wrote {} tasks to {}", tasks.len(), path.display())?;
    Ok(())
}

fn shape_k(c: &ExperimentConfig) -> u32 {
    if c.mode == LabelMode::Binary {
        1
    } else {
        c.k
    }
}

fn sigma(c: &ExperimentConfig, seed: u64) -> Result<DMatrix<f64>, CliError> {
    Ok(match closed_form_second_moment(&c.spec) {
        Some(s) => s,
        None => {
            feature_second_moment(
                &c.spec,
                &mut RngSeed::with_stream(seed, tags::MOMENTS).rng(),
            )?
            .matrix
        }
    })
}

pub fn train(ctx: &Context, console: &mut dyn Write) -> Result<(), CliError> {
    let seed = ctx.seed()?;
    let c = &ctx.cfg;
    let init = match ctx.params.as_slice() {
        [] => DMatrix::zeros(c.dim, c.dim),
        [path] => {
            let (p, mode) = load_params(path)?;
            if mode != c.mode || p.dim() != c.dim {
                return Err(CliError::Config(format!(
                    "resume params are {mode} with d = {}, config is {} with d = {}",
                    p.dim(),
                    c.mode,
                    c.dim
                )));
            }
            p.u
        }
        _ => {
            return Err(CliError::Config(
                "train accepts at most one --params file".into(),
            ))
        }
    };
    let report: TrainReport = train_from(&c.train, &c.spec, c.n, shape_k(c), seed, init)?;
    let params = AttentionParams::new(report.u.clone(), c.train.radius)?;
    save_params(&ctx.out("params.txt")?, &params, c.mode)?;
    report.write_trace(create(&ctx.out("train_trace.csv")?)?)?;
    writeln!(
        console,
        "iterations {} converged {} final loss {:.6e} step {:.4e} projections {}",
        report.iterations,
        report.converged,
        report.loss_trace.last().copied().unwrap_or(f64::NAN),
        report.step_size,
        report.projection_hits
    )?;
    if report.no_progress {
        writeln!(console, "warning: parameters did not move")?;
    }
    if c.mode == LabelMode::ResponseTime {
        let target = population_minimizer_rt(&sigma(c, seed)?)?;
        let dist = (&report.u - &target).norm();
        writeln!(
            console,
            "‖U - Sigma^-1‖_F = {dist:.6} (relative {:.6})",
            dist / target.norm()
        )?;
        if let Some(limit) = c.train_target {
            if dist > limit {
                return Err(CliError::Acceptance(format!(
                    "‖U - Sigma^-1‖_F = {dist} exceeds target {limit}"
                )));
            }
        }
    }
    Ok(())
}

fn load_all_params(ctx: &Context) -> Result<Vec<(AttentionParams, LabelMode)>, CliError> {
    ctx.params.iter().map(|p| Ok(load_params(p)?)).collect()
}

pub fn eval(ctx: &Context, console: &mut dyn Write) -> Result<(), CliError> {
    let seed = ctx.seed()?;
    let c = &ctx.cfg;
    let all = load_all_params(ctx)?;
    if let Some(data) = &c.eval_data {
        return eval_real(ctx, &all, data, seed, console);
    }
    let mut reports: Vec<EvalReport> = Vec::new();
    for (params, mode) in &all {
        if params.dim() != c.dim {
            return Err(CliError::Config(format!(
                "params have d = {}, config has d = {}",
                params.dim(),
                c.dim
            )));
        }
        let ecfg = EvalConfig {
            m_demos: c.m,
            k: c.k,
            n_tasks: c.eval_tasks,
            truth: c.eval_truth,
            ddm: c.ddm,
        };
        reports.push(eval_accuracy(params, &c.spec, *mode, &ecfg, seed)?);
    }
    let table = table_report(&reports)?;
    write!(console, "{}", table.text)?;
    write_text(&ctx.out("eval_report.csv")?, &table.csv)?;
    if table.is_empty {
        return Err(CliError::Config(
            "no data: pass at least one --params file".into(),
        ));
    }
    let mut w = csv_writer(&ctx.out("eval_records.csv")?)?;
    w.write_record(["mode", "split", "task", "output", "prediction", "truth"])
        .map_err(core_csv)?;
    for r in &reports {
        for rec in &r.records {
            w.write_record([
                r.mode.as_str().to_string(),
                rec.source.as_str().to_string(),
                rec.task.to_string(),
                rec.output.to_string(),
                rec.prediction.to_string(),
                rec.truth.map(|t| t.to_string()).unwrap_or_default(),
            ])
            .map_err(core_csv)?;
        }
    }
    w.flush()?;
    if c.eval_svg {
        let groups: Vec<(String, Vec<(String, f64)>)> = reports
            .iter()
            .map(|r| {
                (
                    r.mode.as_str().to_string(),
                    vec![
                        ("ID".to_string(), r.id.accuracy),
                        ("OOD".to_string(), r.ood.accuracy),
                    ],
                )
            })
            .collect();
        write_text(
            &ctx.out("eval_report.svg")?,
            &bar_chart("accuracy", &groups),
        )?;
    }
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, CliError> {
    Ok(csv::Writer::from_writer(create(path)?))
}

fn core_csv(e: csv::Error) -> CliError {
    CliError::Core(e.into())
}

/// Accuracy on recorded trials for each `M`: training participants as the
/// in-distribution split, held-out participants as the new type.
fn eval_real(
    ctx: &Context,
    all: &[(AttentionParams, LabelMode)],
    data: &Path,
    seed: u64,
    console: &mut dyn Write,
) -> Result<(), CliError> {
    let c = &ctx.cfg;
    if all.is_empty() {
        return Err(CliError::Config(
            "no data: pass at least one --params file".into(),
        ));
    }
    let load = load_trials(data, &c.schema, ctx.strict)?;
    for e in &load.errors {
        eprintln!(
            "warning: {}: line {}: {}",
            data.display(),
            e.line,
            e.message
        );
    }
    let split = match &c.heldout_ids {
        Some(ids) => SplitSpec {
            heldout: ids.iter().cloned().collect(),
            min_trials: c.min_trials,
        },
        None => SplitSpec::last_participants(&load.records, c.heldout, c.min_trials),
    };
    let mut rows: Vec<(LabelMode, &'static str, usize, SplitAccuracy)> = Vec::new();
    for &m in &c.m_grid {
        let tasks = build_real_tasks(&load.records, &split, m, seed)?;
        for (pid, count) in &tasks.skipped {
            eprintln!("warning: M = {m}: participant {pid} has {count} trials, skipped");
        }
        for (params, mode) in all {
            for (name, set, source) in [
                ("id", &tasks.train, ThetaSource::InDist),
                ("ood", &tasks.heldout, ThetaSource::Ood),
            ] {
                let (acc, _) = eval_tasks(params, set, *mode, EvalTruth::SampledLabel, source)?;
                rows.push((*mode, name, m, acc));
            }
        }
    }
    let mut w = csv_writer(&ctx.out("eval_m_sweep.csv")?)?;
    w.write_record(["mode", "split", "m", "accuracy", "ci_radius", "n_scored"])
        .map_err(core_csv)?;
    for (mode, split, m, a) in &rows {
        w.write_record([
            mode.as_str().to_string(),
            split.to_string(),
            m.to_string(),
            a.accuracy.to_string(),
            a.ci_radius.to_string(),
            a.n_scored.to_string(),
        ])
        .map_err(core_csv)?;
    }
    w.flush()?;
    write!(console, "{:<22}", "")?;
    for m in &c.m_grid {
        write!(console, "{:>14}", format!("M={m}"))?;
    }
    writeln!(console)?;
    for (_, mode) in all {
        for split in ["id", "ood"] {
            write!(console, "{:<22}", format!("{} {}", mode.as_str(), split))?;
            for m in &c.m_grid {
                let a = rows
                    .iter()
                    .find(|r| r.0 == *mode && r.1 == split && r.2 == *m)
                    .map(|r| r.3.accuracy);
                write!(
                    console,
                    "{:>14}",
                    a.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into())
                )?;
            }
            writeln!(console)?;
        }
    }
    Ok(())
}

pub fn impossibility(ctx: &Context, console: &mut dyn Write) -> Result<(), CliError> {
    let c = &ctx.cfg;
    if c.theta_max < c.theta_min {
        return Err(CliError::Config(
            "impossibility.theta_max is below theta_min".into(),
        ));
    }
    let ustar = counterexample_ustar()?;
    writeln!(
        console,
        "I(u) = 1/3 root U* = {:.12} certified on [{:.15}, {:.15}] with I - 1/3 = ({:.3e}, {:.3e}) after {} bisections",
        ustar.root, ustar.lo, ustar.hi, ustar.f_lo, ustar.f_hi, ustar.iterations
    )?;
    let limit = binary_population_minimizer_1d(&BinaryThetaLaw::Uniform)?;
    writeln!(
        console,
        "trained binary limit U_bar = {:.12} on [{:.15}, {:.15}]",
        limit.root, limit.lo, limit.hi
    )?;
    let n = ((c.theta_max - c.theta_min) / c.theta_step + 1e-9).floor() as usize + 1;
    let points: Vec<_> = (0..n)
        .map(|i| impossibility_gap(c.theta_min + i as f64 * c.theta_step, limit.root))
        .collect();
    write_impossibility_csv(create(&ctx.out("impossibility.csv")?)?, &points)?;
    let series = [
        Series {
            label: "predicted".into(),
            points: points.iter().map(|p| (p.theta_new, p.predicted)).collect(),
        },
        Series {
            label: "true".into(),
            points: points.iter().map(|p| (p.theta_new, p.truth)).collect(),
        },
        Series {
            label: "TV".into(),
            points: points.iter().map(|p| (p.theta_new, p.tv)).collect(),
        },
    ];
    write_text(
        &ctx.out("impossibility.svg")?,
        &line_chart(
            "binary predictions for a new type",
            "theta_new",
            "probability",
            &series,
            false,
        ),
    )?;
    let worst = points
        .iter()
        .filter(|p| p.theta_new.abs() >= 8.0)
        .map(|p| p.tv)
        .fold(f64::INFINITY, f64::min);
    if worst.is_finite() {
        writeln!(console, "min TV over |theta_new| >= 8: {worst:.6}")?;
    }
    Ok(())
}

pub fn rates(ctx: &Context, console: &mut dyn Write) -> Result<(), CliError> {
    let seed = ctx.seed()?;
    let c = &ctx.cfg;
    let grid = &c.rate_grid;
    if grid.len() < 4 {
        return Err(CliError::Config(format!(
            "rates.grid needs at least 4 points, got {}",
            grid.len()
        )));
    }
    let report: RateReport = match c.rate_variable.as_str() {
        "ratio_exp" => ratio_concentration_test(
            &RatioPair::ShiftedExponential {
                x_shift: 0.5,
                x_scale: 0.5,
                y_shift: 1.0,
                y_scale: 1.0,
            },
            grid,
            c.rate_replications,
            seed,
        )?,
        "ratio_ddm" => ratio_concentration_test(
            &RatioPair::Ddm { drift: 1.0 },
            grid,
            c.rate_replications,
            seed,
        )?,
        other => {
            let rc = RateConfig {
                spec: c.spec.clone(),
                fixed_n: c.rate_fixed_n,
                fixed_k: c.rate_fixed_k,
                n_theta: c.rate_n_theta,
                replications: c.rate_replications,
                ddm: c.ddm,
            };
            rate_sweep(RateVariable::parse(other)?, grid, &rc, seed)?
        }
    };
    report.write_csv(create(&ctx.out("rate_report.csv")?)?)?;
    let series = [Series {
        label: report.variable.clone(),
        points: report
            .grid
            .iter()
            .copied()
            .zip(report.errors.iter().copied())
            .collect(),
    }];
    write_text(
        &ctx.out("rate_report.svg")?,
        &line_chart("convergence", &report.variable, "error", &series, true),
    )?;
    for (x, e) in report.grid.iter().zip(&report.errors) {
        writeln!(console, "{x:>8} {e:.6e}")?;
    }
    match report.fit {
        Some(f) => writeln!(console, "slope {:.4} ± {:.4}", f.slope, f.slope_se)?,
        None => writeln!(console, "errors are identically zero")?,
    }
    if let Some(target) = c.rate_target {
        if !report.within(target, c.rate_tolerance) {
            return Err(CliError::Acceptance(format!(
                "slope {:?} outside {target} ± {}",
                report.slope(),
                c.rate_tolerance
            )));
        }
    }
    Ok(())
}
