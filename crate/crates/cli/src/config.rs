//! Flat `key = value` experiment configs with dotted section keys.
//!
//! Blank lines and text after `#` are ignored. Unknown keys are rejected so a
//! typo cannot silently fall back to a default. See `docs/config.md`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use icra_core::eval::{EvalTruth, RateVariable};
use icra_core::ingest::TrialSchema;
use icra_core::model::{FeatureDist, GaussianMixture, MixtureComponent, ThetaDist};
use icra_core::synthgen::{DdmConfig, DdmMethod, ThetaSource};
use icra_core::training::{StepRule, TrainConfig};
use icra_core::{LabelMode, PopulationSpec};
use nalgebra::DMatrix;

use crate::error::CliError;

const KNOWN_KEYS: &[&str] = &[
    "seed",
    "out",
    "mode",
    "dim",
    "n",
    "m",
    "k",
    "population.preset",
    "population.feature_sigma",
    "population.norm_bound",
    "population.theta_means",
    "population.theta_weights",
    "population.theta_cov",
    "population.ood_mean",
    "population.ood_cov",
    "ddm.method",
    "ddm.dt",
    "ddm.max_time",
    "ddm.bridge",
    "generate.n_tasks",
    "generate.source",
    "train.batch_tasks",
    "train.step",
    "train.max_iters",
    "train.grad_tol",
    "train.radius",
    "train.fresh_tasks",
    "train.holdout_tasks",
    "train.target",
    "eval.n_tasks",
    "eval.truth",
    "eval.svg",
    "eval.data",
    "eval.m_grid",
    "ingest.heldout",
    "ingest.heldout_ids",
    "ingest.min_trials",
    "ingest.columns.participant",
    "ingest.columns.r0a",
    "ingest.columns.r0b",
    "ingest.columns.r1a",
    "ingest.columns.r1b",
    "ingest.columns.choice",
    "ingest.columns.rt",
    "impossibility.theta_min",
    "impossibility.theta_max",
    "impossibility.step",
    "rates.variable",
    "rates.grid",
    "rates.fixed_n",
    "rates.fixed_k",
    "rates.n_theta",
    "rates.replications",
    "rates.target_slope",
    "rates.tolerance",
];

/// Parsed key-value pairs, each remembering its source line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigMap {
    entries: BTreeMap<String, (String, usize)>,
    /// Directory that relative paths in the file are resolved against.
    base: Option<PathBuf>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("line {line_no}: expected `key = value`"))
            })?;
            let key = key.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(CliError::Config(format!(
                    "line {line_no}: unknown key `{key}`"
                )));
            }
            if entries
                .insert(key.to_string(), (value.trim().to_string(), line_no))
                .is_some()
            {
                return Err(CliError::Config(format!(
                    "line {line_no}: duplicate key `{key}`"
                )));
            }
        }
        Ok(Self {
            entries,
            base: None,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let mut map = Self::parse(&text)?;
        map.base = path.parent().map(Path::to_path_buf);
        Ok(map)
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let p = PathBuf::from(self.raw(key)?);
        Some(match &self.base {
            Some(base) if p.is_relative() => base.join(p),
            _ => p,
        })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, line)) => v.parse().map(Some).map_err(|_| {
                CliError::Config(format!("line {line}: cannot parse `{v}` for `{key}`"))
            }),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, CliError> {
        let Some((v, line)) = self.entries.get(key) else {
            return Ok(None);
        };
        v.split(',')
            .map(|x| {
                x.trim().parse().map_err(|_| {
                    CliError::Config(format!("line {line}: bad list item `{x}` in `{key}`"))
                })
            })
            .collect::<Result<Vec<T>, _>>()
            .map(Some)
    }

    /// Semicolon-separated vectors, e.g. `2,0; -2,0`.
    pub fn vectors(&self, key: &str) -> Result<Option<Vec<Vec<f64>>>, CliError> {
        let Some((v, line)) = self.entries.get(key) else {
            return Ok(None);
        };
        v.split(';')
            .map(|part| {
                part.split(',')
                    .map(|x| {
                        x.trim().parse().map_err(|_| {
                            CliError::Config(format!("line {line}: bad number `{x}` in `{key}`"))
                        })
                    })
                    .collect()
            })
            .collect::<Result<Vec<Vec<f64>>, _>>()
            .map(Some)
    }
}

/// Everything a subcommand needs, with defaults filled in.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub mode: LabelMode,
    pub dim: usize,
    pub n: usize,
    pub m: usize,
    pub k: u32,
    pub spec: PopulationSpec,
    pub ddm: DdmConfig,
    pub n_tasks: usize,
    pub source: ThetaSource,
    pub train: TrainConfig,
    pub train_target: Option<f64>,
    pub eval_tasks: usize,
    pub eval_truth: EvalTruth,
    pub eval_svg: bool,
    pub eval_data: Option<PathBuf>,
    pub m_grid: Vec<usize>,
    pub heldout: usize,
    pub heldout_ids: Option<Vec<String>>,
    pub min_trials: usize,
    pub schema: TrialSchema,
    pub theta_min: f64,
    pub theta_max: f64,
    pub theta_step: f64,
    pub rate_variable: String,
    pub rate_grid: Vec<usize>,
    pub rate_fixed_n: usize,
    pub rate_fixed_k: u32,
    pub rate_n_theta: usize,
    pub rate_replications: usize,
    pub rate_target: Option<f64>,
    pub rate_tolerance: f64,
}

fn parse_bool(map: &ConfigMap, key: &str, default: bool) -> Result<bool, CliError> {
    match map.raw(key) {
        None => Ok(default),
        Some("true" | "yes" | "1") => Ok(true),
        Some("false" | "no" | "0") => Ok(false),
        Some(other) => Err(CliError::Config(format!(
            "`{key}` must be true or false, got `{other}`"
        ))),
    }
}

fn population(map: &ConfigMap, dim: usize) -> Result<PopulationSpec, CliError> {
    let preset = map.raw("population.preset").unwrap_or("desk");
    let mut spec = match preset {
        "desk" => PopulationSpec::desk_default(dim)?,
        "rademacher_1d" => {
            if dim != 1 {
                return Err(CliError::Config(
                    "preset rademacher_1d needs dim = 1".into(),
                ));
            }
            PopulationSpec::rademacher_1d()
        }
        other => {
            return Err(CliError::Config(format!(
                "unknown population preset `{other}`"
            )))
        }
    };
    if let Some(sigma) = map.get::<f64>("population.feature_sigma")? {
        spec.features = FeatureDist::IsotropicGaussian { sigma };
    }
    if let Some(b) = map.get::<f64>("population.norm_bound")? {
        spec.norm_bound = b;
    }
    let cov = |key: &str| -> Result<Option<DMatrix<f64>>, CliError> {
        Ok(map
            .get::<f64>(key)?
            .map(|c| DMatrix::identity(dim, dim) * c))
    };
    if let Some(means) = map.vectors("population.theta_means")? {
        let weights = match map.list::<f64>("population.theta_weights")? {
            Some(w) => w,
            None => vec![1.0 / means.len() as f64; means.len()],
        };
        if weights.len() != means.len() {
            return Err(CliError::Config(
                "theta_weights and theta_means differ in length".into(),
            ));
        }
        let components = means
            .into_iter()
            .zip(weights)
            .map(|(mean, weight)| MixtureComponent {
                weight,
                mean: mean.into(),
            })
            .collect();
        let covariance =
            cov("population.theta_cov")?.unwrap_or_else(|| DMatrix::identity(dim, dim) * 0.25);
        spec.theta = ThetaDist::Mixture(GaussianMixture::new(components, covariance)?);
    } else if map.raw("population.theta_cov").is_some()
        || map.raw("population.theta_weights").is_some()
    {
        return Err(CliError::Config(
            "theta_cov and theta_weights need theta_means".into(),
        ));
    }
    if let Some(mean) = map.list::<f64>("population.ood_mean")? {
        let covariance =
            cov("population.ood_cov")?.unwrap_or_else(|| DMatrix::identity(dim, dim) * 0.25);
        spec.ood_theta = ThetaDist::Mixture(GaussianMixture::new(
            vec![MixtureComponent {
                weight: 1.0,
                mean: mean.into(),
            }],
            covariance,
        )?);
    }
    spec.validate()?;
    Ok(spec)
}

impl ExperimentConfig {
    pub fn from_map(map: &ConfigMap) -> Result<Self, CliError> {
        let mode: LabelMode = match map.raw("mode") {
            Some(m) => m.parse()?,
            None => LabelMode::ResponseTime,
        };
        let dim = map.get_or("dim", 5usize)?;
        if dim == 0 {
            return Err(CliError::Config("dim must be positive".into()));
        }
        let spec = population(map, dim)?;
        let method = match map.raw("ddm.method").unwrap_or("series") {
            "series" => DdmMethod::Series,
            "euler" => DdmMethod::Euler,
            other => return Err(CliError::Config(format!("unknown ddm.method `{other}`"))),
        };
        let ddm_default = DdmConfig::default();
        let ddm = DdmConfig {
            dt: map.get_or("ddm.dt", ddm_default.dt)?,
            max_time: map.get_or("ddm.max_time", ddm_default.max_time)?,
            bridge: parse_bool(map, "ddm.bridge", ddm_default.bridge)?,
            method,
        };
        ddm.validate()?;

        let mut train = TrainConfig::new(mode, dim);
        train.ddm = ddm;
        train.batch_tasks = map.get_or("train.batch_tasks", train.batch_tasks)?;
        train.step = match map.raw("train.step") {
            None | Some("auto") => StepRule::InverseSmoothness,
            Some(_) => StepRule::Fixed(map.get::<f64>("train.step")?.expect("present")),
        };
        train.max_iters = map.get_or("train.max_iters", train.max_iters)?;
        train.grad_tol = map.get_or("train.grad_tol", train.grad_tol)?;
        train.radius = map.get_or("train.radius", train.radius)?;
        train.fresh_tasks = parse_bool(map, "train.fresh_tasks", train.fresh_tasks)?;
        train.holdout_tasks = map.get_or("train.holdout_tasks", train.holdout_tasks)?;
        train.validate()?;

        let eval_truth = match map.raw("eval.truth").unwrap_or("bayes") {
            "bayes" => EvalTruth::BayesSign,
            "sampled" => EvalTruth::SampledLabel,
            other => return Err(CliError::Config(format!("unknown eval.truth `{other}`"))),
        };
        let source = match map.raw("generate.source").unwrap_or("id") {
            "id" => ThetaSource::InDist,
            "ood" => ThetaSource::Ood,
            other => {
                return Err(CliError::Config(format!(
                    "unknown generate.source `{other}`"
                )))
            }
        };
        let d = TrialSchema::default();
        let col = |key: &str, default: String| map.raw(key).map(String::from).unwrap_or(default);
        let schema = TrialSchema {
            participant: col("ingest.columns.participant", d.participant),
            r0a: col("ingest.columns.r0a", d.r0a),
            r0b: col("ingest.columns.r0b", d.r0b),
            r1a: col("ingest.columns.r1a", d.r1a),
            r1b: col("ingest.columns.r1b", d.r1b),
            choice: col("ingest.columns.choice", d.choice),
            rt: col("ingest.columns.rt", d.rt),
        };
        let rate_variable = map.raw("rates.variable").unwrap_or("rt_n").to_string();
        if !matches!(rate_variable.as_str(), "ratio_exp" | "ratio_ddm") {
            RateVariable::parse(&rate_variable)?;
        }
        let n = map.get_or("n", 32usize)?;
        let k = map.get_or("k", 32u32)?;
        let theta_step: f64 = map.get_or("impossibility.step", 0.25)?;
        if !(theta_step > 0.0) {
            return Err(CliError::Config(
                "impossibility.step must be positive".into(),
            ));
        }
        Ok(Self {
            seed: map.get("seed")?,
            out: map.path("out").unwrap_or_else(|| PathBuf::from(".")),
            mode,
            dim,
            n,
            m: map.get_or("m", n)?,
            k,
            spec,
            ddm,
            n_tasks: map.get_or("generate.n_tasks", 1000usize)?,
            source,
            train,
            train_target: map.get("train.target")?,
            eval_tasks: map.get_or("eval.n_tasks", 2000usize)?,
            eval_truth,
            eval_svg: parse_bool(map, "eval.svg", true)?,
            eval_data: map.path("eval.data"),
            m_grid: map.list("eval.m_grid")?.unwrap_or_else(|| vec![4, 8, 16]),
            heldout: map.get_or("ingest.heldout", 4usize)?,
            heldout_ids: map.list("ingest.heldout_ids")?,
            min_trials: map.get_or("ingest.min_trials", 0usize)?,
            schema,
            theta_min: map.get_or("impossibility.theta_min", -10.0)?,
            theta_max: map.get_or("impossibility.theta_max", 10.0)?,
            theta_step,
            rate_variable,
            rate_grid: map
                .list("rates.grid")?
                .unwrap_or_else(|| vec![16, 32, 64, 128, 256]),
            rate_fixed_n: map.get_or("rates.fixed_n", 64usize)?,
            rate_fixed_k: map.get_or("rates.fixed_k", k)?,
            rate_n_theta: map.get_or("rates.n_theta", 100_000usize)?,
            rate_replications: map.get_or("rates.replications", 2000usize)?,
            rate_target: map.get("rates.target_slope")?,
            rate_tolerance: map.get_or("rates.tolerance", 0.15)?,
        })
    }
}
