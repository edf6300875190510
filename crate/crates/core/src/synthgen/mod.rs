//! Synthetic heterogeneous-preference tasks.

mod ddm;
pub mod io;

pub use ddm::{
    ddm_choice_prob, ddm_expected_time, ddm_time_variance, sample_aggregate, sample_first_passage,
    simulate_ddm, DdmConfig, DdmMethod, BOUNDARY, MAX_RETRIES,
};

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::model::{
    logistic, Demonstration, FeatureDiff, FeatureDist, LabelMode, Observation, PopulationSpec,
    RewardParam, TaskSample, ThetaDist,
};
use crate::rng::RngSeed;

/// Attempts allowed before the norm-bound rejection loop gives up.
pub const MAX_REJECTIONS: usize = 1_000_000;

/// Which human-type distribution to draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ThetaSource {
    InDist,
    Ood,
}

impl ThetaSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            ThetaSource::InDist => "id",
            ThetaSource::Ood => "ood",
        }
    }
}

/// Shape of one generated task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskShape {
    pub n_demos: usize,
    /// Annotators averaged per comparison; forced to 1 in binary mode.
    pub k: u32,
    pub mode: LabelMode,
}

impl TaskShape {
    pub fn new(n_demos: usize, k: u32, mode: LabelMode) -> Self {
        Self { n_demos, k, mode }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_demos == 0 {
            return Err(Error::Config(
                "a task needs at least one demonstration".into(),
            ));
        }
        if self.k == 0 {
            return Err(Error::Config("annotator count k must be positive".into()));
        }
        Ok(())
    }
}

pub fn sample_theta<R: Rng + ?Sized>(
    spec: &PopulationSpec,
    source: ThetaSource,
    rng: &mut R,
) -> RewardParam {
    let dist = match source {
        ThetaSource::InDist => &spec.theta,
        ThetaSource::Ood => &spec.ood_theta,
    };
    let v = match dist {
        ThetaDist::Mixture(mix) => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut chosen = &mix.components[mix.components.len() - 1];
            for c in &mix.components {
                acc += c.weight;
                if u < acc {
                    chosen = c;
                    break;
                }
            }
            let d = mix.dim();
            let eps = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            &chosen.mean + mix.chol_factor() * eps
        }
        ThetaDist::TanhUniform { dim } => DVector::from_fn(*dim, |_, _| loop {
            let m: f64 = rng.random_range(-1.0..1.0);
            if m.abs() < 1.0 {
                break 2.0 * m.atanh();
            }
        }),
    };
    RewardParam::from_vector(v).expect("finite mixture draw")
}

/// One feature difference, redrawn until its norm is at most the bound.
pub fn sample_feature<R: Rng + ?Sized>(spec: &PopulationSpec, rng: &mut R) -> Result<FeatureDiff> {
    let d = spec.dim;
    for _ in 0..MAX_REJECTIONS {
        let v = match spec.features {
            FeatureDist::IsotropicGaussian { sigma } => {
                DVector::from_fn(d, |_, _| sigma * rng.sample::<f64, _>(StandardNormal))
            }
            FeatureDist::UniformCube { half_width } => {
                DVector::from_fn(d, |_, _| rng.random_range(-half_width..half_width))
            }
            FeatureDist::Rademacher => {
                DVector::from_fn(d, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 })
            }
        };
        if v.norm() <= spec.norm_bound {
            return Ok(FeatureDiff::from_vector(v));
        }
    }
    Err(Error::Config(format!(
        "norm bound {} rejected {MAX_REJECTIONS} consecutive feature draws",
        spec.norm_bound
    )))
}

/// Choice (and, in response-time mode, time) for one comparison.
///
/// Binary mode records a single annotator and no time; the choice is drawn from
/// its exact DDM marginal `sigma(v)`. Response-time mode averages `k` annotators.
pub fn sample_demonstration<R: Rng + ?Sized>(
    phi: FeatureDiff,
    theta: &RewardParam,
    k: u32,
    mode: LabelMode,
    cfg: &DdmConfig,
    rng: &mut R,
) -> Result<Demonstration> {
    let obs = sample_observation(&phi, theta, k, mode, cfg, rng)?;
    Ok(Demonstration { phi, obs })
}

fn sample_observation<R: Rng + ?Sized>(
    phi: &FeatureDiff,
    theta: &RewardParam,
    k: u32,
    mode: LabelMode,
    cfg: &DdmConfig,
    rng: &mut R,
) -> Result<Observation> {
    if k == 0 {
        return Err(Error::Config("annotator count k must be positive".into()));
    }
    let drift = phi.logit(theta)?;
    match mode {
        LabelMode::Binary => {
            let up = rng.random::<f64>() < logistic(drift);
            Ok(Observation {
                z: if up { 1.0 } else { -1.0 },
                t: None,
                k: 1,
            })
        }
        LabelMode::ResponseTime => {
            let (z, t) = sample_aggregate(drift, k, cfg, rng)?;
            Ok(Observation { z, t: Some(t), k })
        }
    }
}

/// One task: a human type, `n_demos` i.i.d. demonstrations and a query drawn the same way.
pub fn generate_task<R: Rng + ?Sized>(
    spec: &PopulationSpec,
    shape: &TaskShape,
    source: ThetaSource,
    cfg: &DdmConfig,
    rng: &mut R,
) -> Result<TaskSample> {
    shape.validate()?;
    let theta = sample_theta(spec, source, rng);
    check_dim(spec.dim, theta.dim())?;
    let mut demos = Vec::with_capacity(shape.n_demos);
    for _ in 0..shape.n_demos {
        let phi = sample_feature(spec, rng)?;
        demos.push(sample_demonstration(
            phi, &theta, shape.k, shape.mode, cfg, rng,
        )?);
    }
    let query = sample_feature(spec, rng)?;
    let query_truth = sample_observation(&query, &theta, shape.k, shape.mode, cfg, rng)?;
    Ok(TaskSample {
        theta: Some(theta),
        demos,
        query,
        query_truth,
    })
}

/// `n_tasks` tasks, task `i` drawn from stream `seed.substream(i)`; the result does
/// not depend on the worker count.
pub fn generate_tasks(
    spec: &PopulationSpec,
    shape: &TaskShape,
    source: ThetaSource,
    cfg: &DdmConfig,
    n_tasks: usize,
    seed: RngSeed,
) -> Result<Vec<TaskSample>> {
    shape.validate()?;
    cfg.validate()?;
    (0..n_tasks)
        .into_par_iter()
        .map(|i| {
            generate_task(
                spec,
                shape,
                source,
                cfg,
                &mut seed.substream(i as u64).rng(),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GaussianMixture, MixtureComponent};
    use nalgebra::DMatrix;

    fn two_component(m: f64) -> PopulationSpec {
        let mix = GaussianMixture::new(
            vec![
                MixtureComponent {
                    weight: 0.5,
                    mean: DVector::from_vec(vec![m, 0.0]),
                },
                MixtureComponent {
                    weight: 0.5,
                    mean: DVector::from_vec(vec![-m, 0.0]),
                },
            ],
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let ood = GaussianMixture::single(vec![0.0, 20.0], 1.0).unwrap();
        PopulationSpec {
            dim: 2,
            features: FeatureDist::IsotropicGaussian { sigma: 1.0 },
            norm_bound: f64::INFINITY,
            theta: ThetaDist::Mixture(mix),
            ood_theta: ThetaDist::Mixture(ood),
        }
    }

    #[test]
    fn degenerate_mixture_returns_mean() {
        let mut spec = two_component(1.0);
        spec.theta = ThetaDist::Mixture(GaussianMixture::single(vec![1.5, -2.0], 1e-18).unwrap());
        let mut rng = RngSeed::new(0).rng();
        let th = sample_theta(&spec, ThetaSource::InDist, &mut rng);
        assert!((th.as_vector()[0] - 1.5).abs() < 1e-8);
        assert!((th.as_vector()[1] + 2.0).abs() < 1e-8);
    }

    #[test]
    fn symmetric_mixture_mean_is_zero() {
        let spec = two_component(3.0);
        let mut rng = RngSeed::new(1).rng();
        let n = 100_000;
        let mut s = 0.0;
        for _ in 0..n {
            s += sample_theta(&spec, ThetaSource::InDist, &mut rng).as_vector()[0];
        }
        // per-draw variance m^2 + 1
        let se = (10.0f64 / n as f64).sqrt();
        assert!((s / n as f64).abs() < 3.0 * se);
    }

    #[test]
    fn ood_draws_come_from_ood_component() {
        let spec = two_component(3.0);
        let mut rng = RngSeed::new(2).rng();
        let n = 10_000;
        let (mut s0, mut s1) = (0.0, 0.0);
        for _ in 0..n {
            let th = sample_theta(&spec, ThetaSource::Ood, &mut rng);
            s0 += th.as_vector()[0];
            s1 += th.as_vector()[1];
        }
        let se = (1.0 / n as f64).sqrt();
        assert!((s0 / n as f64).abs() < 4.0 * se);
        assert!((s1 / n as f64 - 20.0).abs() < 4.0 * se);
    }

    #[test]
    fn rademacher_is_fair() {
        let spec = PopulationSpec::rademacher_1d();
        let mut rng = RngSeed::new(3).rng();
        let n = 100_000;
        let mut ups = 0usize;
        for _ in 0..n {
            let x = sample_feature(&spec, &mut rng).unwrap().as_vector()[0];
            assert!(x == 1.0 || x == -1.0);
            ups += (x > 0.0) as usize;
        }
        let se = (0.25 / n as f64).sqrt();
        assert!((ups as f64 / n as f64 - 0.5).abs() < 3.0 * se);
    }

    #[test]
    fn gaussian_covariance() {
        let mut spec = two_component(1.0);
        spec.features = FeatureDist::IsotropicGaussian { sigma: 1.5 };
        let mut rng = RngSeed::new(4).rng();
        let n = 100_000;
        let mut c = DMatrix::<f64>::zeros(2, 2);
        for _ in 0..n {
            let v = sample_feature(&spec, &mut rng).unwrap().into_vector();
            c += &v * v.transpose();
        }
        c /= n as f64;
        let target = DMatrix::<f64>::identity(2, 2) * 2.25;
        assert!((c - &target).norm() < 0.05 * target.norm());
    }

    #[test]
    fn norm_bound_respected_and_enforced() {
        let mut spec = PopulationSpec::desk_default(5).unwrap();
        let mut rng = RngSeed::new(5).rng();
        for _ in 0..10_000 {
            assert!(sample_feature(&spec, &mut rng).unwrap().norm() <= 4.0);
        }
        spec.norm_bound = 1e-6;
        assert!(matches!(
            sample_feature(&spec, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn demonstration_labels() {
        let theta = RewardParam::new(vec![1.0]).unwrap();
        let phi = FeatureDiff::new(vec![1.0]);
        let cfg = DdmConfig::default();
        let mut rng = RngSeed::new(6).rng();
        let d = sample_demonstration(
            phi.clone(),
            &theta,
            1,
            LabelMode::ResponseTime,
            &cfg,
            &mut rng,
        )
        .unwrap();
        assert!(d.obs.z == 1.0 || d.obs.z == -1.0);
        let b = sample_demonstration(phi.clone(), &theta, 7, LabelMode::Binary, &cfg, &mut rng)
            .unwrap();
        assert_eq!(b.obs.k, 1);
        assert!(b.obs.t.is_none());

        let big =
            sample_demonstration(phi, &theta, 10_000, LabelMode::ResponseTime, &cfg, &mut rng)
                .unwrap();
        let se = ((1.0 - 0.5f64.tanh().powi(2)) / 10_000.0).sqrt();
        assert!((big.obs.z - 0.5f64.tanh()).abs() < 3.0 * se);
    }

    #[test]
    fn tasks_are_deterministic_and_distinct() {
        let spec = PopulationSpec::desk_default(3).unwrap();
        let shape = TaskShape::new(4, 3, LabelMode::ResponseTime);
        let cfg = DdmConfig::default();
        let a = generate_tasks(
            &spec,
            &shape,
            ThetaSource::InDist,
            &cfg,
            1000,
            RngSeed::new(8),
        )
        .unwrap();
        let b = generate_tasks(
            &spec,
            &shape,
            ThetaSource::InDist,
            &cfg,
            1000,
            RngSeed::new(8),
        )
        .unwrap();
        assert_eq!(a, b);
        let mut firsts: Vec<u64> = a
            .iter()
            .map(|t| t.theta.as_ref().unwrap().as_vector()[0].to_bits())
            .collect();
        firsts.sort_unstable();
        firsts.dedup();
        assert_eq!(firsts.len(), 1000);
        for t in &a {
            t.validate().unwrap();
            assert_eq!(t.n_demos(), 4);
        }
    }

    #[test]
    fn single_demo_task() {
        let spec = PopulationSpec::desk_default(2).unwrap();
        let mut rng = RngSeed::new(9).rng();
        let t = generate_task(
            &spec,
            &TaskShape::new(1, 1, LabelMode::Binary),
            ThetaSource::InDist,
            &DdmConfig::default(),
            &mut rng,
        )
        .unwrap();
        t.validate().unwrap();
        assert_eq!(t.n_demos(), 1);
    }

    #[test]
    fn tanh_uniform_theta() {
        let spec = PopulationSpec::rademacher_1d();
        let mut rng = RngSeed::new(10).rng();
        let n = 50_000;
        let mut below = 0usize;
        for _ in 0..n {
            let th = sample_theta(&spec, ThetaSource::InDist, &mut rng).as_vector()[0];
            below += ((0.5 * th).tanh() < 0.5) as usize;
        }
        // P(m < 0.5) = 0.75
        let se = (0.75f64 * 0.25 / n as f64).sqrt();
        assert!((below as f64 / n as f64 - 0.75).abs() < 4.0 * se);
    }
}
