//! Domain types and the Bradley–Terry kernels.
//!
//! Everything downstream touches features only through the difference
//! `phi(x, y1) - phi(x, y0)`, carried here as [`FeatureDiff`]. A human type is a
//! [`RewardParam`]; the probability that it prefers `y1` is `sigma(phi_diff . theta)`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};

/// Clamp applied to probabilities inside log-loss terms only.
pub const LOG_EPS: f64 = 1e-12;

/// Numerically stable logistic function.
#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `tanh(x / 2)`, which equals `2 * logistic(x) - 1`.
#[inline]
pub fn tanh_half(x: f64) -> f64 {
    (0.5 * x).tanh()
}

/// `p` clamped to `[LOG_EPS, 1 - LOG_EPS]` for use inside a logarithm.
#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(LOG_EPS, 1.0 - LOG_EPS)
}

/// Difference feature `phi(x, y1) - phi(x, y0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDiff(DVector<f64>);

impl FeatureDiff {
    pub fn new(values: Vec<f64>) -> Self {
        Self(DVector::from_vec(values))
    }

    pub fn from_vector(values: DVector<f64>) -> Self {
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    /// The BT logit `phi_diff . theta`.
    pub fn logit(&self, theta: &RewardParam) -> Result<f64> {
        check_dim(self.dim(), theta.dim())?;
        Ok(self.0.dot(&theta.0))
    }
}

/// Reward weights of one human type.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardParam(DVector<f64>);

impl RewardParam {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        Self::from_vector(DVector::from_vec(values))
    }

    pub fn from_vector(values: DVector<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(
                "reward parameter has non-finite entries".into(),
            ));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }
}

/// Probability that `y1` is preferred under the BT model.
pub fn bt_prob(phi_diff: &FeatureDiff, theta: &RewardParam) -> Result<f64> {
    Ok(logistic(phi_diff.logit(theta)?))
}

/// `E[z | phi_diff] = tanh(phi_diff . theta / 2)` for `z` in `{-1, +1}`.
pub fn expected_choice(phi_diff: &FeatureDiff, theta: &RewardParam) -> Result<f64> {
    Ok(tanh_half(phi_diff.logit(theta)?))
}

/// Which label row the prompt carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LabelMode {
    /// Choice `z` only.
    Binary,
    /// Choice over response time, `z / t`.
    ResponseTime,
}

impl LabelMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LabelMode::Binary => "binary",
            LabelMode::ResponseTime => "response_time",
        }
    }
}

impl fmt::Display for LabelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "binary" => Ok(LabelMode::Binary),
            "response_time" | "rt" => Ok(LabelMode::ResponseTime),
            other => Err(Error::Config(format!("unknown label mode `{other}`"))),
        }
    }
}

/// Observed response for one comparison, possibly averaged over `k` annotators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    /// Mean choice in `[-1, 1]`; exactly `±1` when `k == 1`.
    pub z: f64,
    /// Mean response time in seconds; `None` when only choices were recorded.
    pub t: Option<f64>,
    pub k: u32,
}

impl Observation {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Data("annotator count k must be positive".into()));
        }
        if !(self.z.abs() <= 1.0) {
            return Err(Error::Data(format!("choice {} outside [-1, 1]", self.z)));
        }
        if self.k == 1 && self.z.abs() != 1.0 {
            return Err(Error::Data(format!(
                "single-annotator choice must be ±1, got {}",
                self.z
            )));
        }
        if let Some(t) = self.t {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Data(format!(
                    "response time must be positive, got {t}"
                )));
            }
        }
        Ok(())
    }

    /// `z / t`, the response-time label.
    pub fn ratio(&self) -> Result<f64> {
        match self.t {
            Some(t) if t > 0.0 => Ok(self.z / t),
            Some(t) => Err(Error::Data(format!(
                "response time must be positive, got {t}"
            ))),
            None => Err(Error::Data("response time missing".into())),
        }
    }
}

/// One in-context example.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub phi: FeatureDiff,
    pub obs: Observation,
}

/// A human type, its demonstrations and one held-out query.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSample {
    /// Known for synthetic tasks, absent for recorded data.
    pub theta: Option<RewardParam>,
    pub demos: Vec<Demonstration>,
    pub query: FeatureDiff,
    pub query_truth: Observation,
}

impl TaskSample {
    pub fn dim(&self) -> usize {
        self.query.dim()
    }

    pub fn n_demos(&self) -> usize {
        self.demos.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.demos.is_empty() {
            return Err(Error::Data("task has no demonstrations".into()));
        }
        let d = self.dim();
        if let Some(theta) = &self.theta {
            check_dim(d, theta.dim())?;
        }
        for demo in &self.demos {
            check_dim(d, demo.phi.dim())?;
            demo.obs.validate()?;
        }
        self.query_truth.validate()
    }

    /// Logit of the query under the task's own parameter, if known.
    pub fn query_logit(&self) -> Option<f64> {
        self.theta.as_ref().and_then(|th| self.query.logit(th).ok())
    }
}

/// Distribution of the difference features.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureDist {
    /// `N(0, sigma^2 I)`.
    IsotropicGaussian { sigma: f64 },
    /// Independent `U(-a, a)` coordinates.
    UniformCube { half_width: f64 },
    /// Independent `±1` coordinates.
    Rademacher,
}

/// One component of a Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: DVector<f64>,
}

/// Gaussian mixture with a shared covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    pub components: Vec<MixtureComponent>,
    pub covariance: DMatrix<f64>,
    chol: DMatrix<f64>,
}

impl GaussianMixture {
    pub fn new(components: Vec<MixtureComponent>, covariance: DMatrix<f64>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Config("mixture needs at least one component".into()));
        }
        let d = covariance.nrows();
        if covariance.ncols() != d {
            return Err(Error::Config("mixture covariance must be square".into()));
        }
        for c in &components {
            check_dim(d, c.mean.len())?;
            if !(c.weight >= 0.0) {
                return Err(Error::Config("mixture weights must be nonnegative".into()));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        if (&covariance - covariance.transpose()).amax() > 1e-12 * covariance.amax().max(1.0) {
            return Err(Error::Config("mixture covariance is not symmetric".into()));
        }
        let chol = nalgebra::Cholesky::new(covariance.clone())
            .ok_or_else(|| Error::Config("mixture covariance is not positive definite".into()))?
            .l();
        Ok(Self {
            components,
            covariance,
            chol,
        })
    }

    /// A single isotropic component `N(mean, scale * I)`.
    pub fn single(mean: Vec<f64>, cov_scale: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(
            vec![MixtureComponent {
                weight: 1.0,
                mean: DVector::from_vec(mean),
            }],
            DMatrix::identity(d, d) * cov_scale,
        )
    }

    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    /// Lower Cholesky factor of the shared covariance.
    pub fn chol_factor(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn mean(&self) -> DVector<f64> {
        self.components
            .iter()
            .fold(DVector::zeros(self.dim()), |acc, c| {
                acc + &c.mean * c.weight
            })
    }

    /// Mahalanobis distance between two points under the shared covariance.
    pub fn mahalanobis(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        let diff = a - b;
        let y = self
            .chol
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor has a positive diagonal");
        y.norm()
    }
}

/// Distribution of human types.
#[derive(Debug, Clone, PartialEq)]
pub enum ThetaDist {
    Mixture(GaussianMixture),
    /// Coordinates `2 atanh(m)` with `m ~ U(-1, 1)`, so that `tanh(theta / 2)` is uniform.
    TanhUniform {
        dim: usize,
    },
}

impl ThetaDist {
    pub fn dim(&self) -> usize {
        match self {
            ThetaDist::Mixture(m) => m.dim(),
            ThetaDist::TanhUniform { dim } => *dim,
        }
    }
}

/// The population: feature distribution, in-distribution human types and a
/// disjoint out-of-distribution group.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationSpec {
    pub dim: usize,
    pub features: FeatureDist,
    /// Norm bound `B` enforced by rejection; `f64::INFINITY` disables it.
    pub norm_bound: f64,
    pub theta: ThetaDist,
    pub ood_theta: ThetaDist,
}

/// Minimum Mahalanobis separation between the OOD mean and every in-distribution mean.
pub const MIN_OOD_SEPARATION: f64 = 6.0;

impl PopulationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("dimension must be at least 1".into()));
        }
        check_dim(self.dim, self.theta.dim())?;
        check_dim(self.dim, self.ood_theta.dim())?;
        if !(self.norm_bound > 0.0) {
            return Err(Error::Config("norm bound must be positive".into()));
        }
        match self.features {
            FeatureDist::IsotropicGaussian { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                return Err(Error::Config("feature sigma must be positive".into()))
            }
            FeatureDist::UniformCube { half_width }
                if !(half_width > 0.0 && half_width.is_finite()) =>
            {
                return Err(Error::Config("cube half-width must be positive".into()))
            }
            FeatureDist::Rademacher if (self.dim as f64).sqrt() > self.norm_bound => {
                return Err(Error::Config(format!(
                    "Rademacher features have norm {} > bound {}",
                    (self.dim as f64).sqrt(),
                    self.norm_bound
                )))
            }
            _ => {}
        }
        if let Some(sep) = self.ood_separation() {
            if sep < MIN_OOD_SEPARATION {
                return Err(Error::Config(format!(
                    "OOD mean is only {sep:.2} standard deviations from an in-distribution mean (need {MIN_OOD_SEPARATION})"
                )));
            }
        }
        Ok(())
    }

    /// Smallest Mahalanobis distance from any OOD component mean to any
    /// in-distribution component mean, when both sides are mixtures.
    pub fn ood_separation(&self) -> Option<f64> {
        match (&self.theta, &self.ood_theta) {
            (ThetaDist::Mixture(id), ThetaDist::Mixture(ood)) => Some(
                ood.components
                    .iter()
                    .flat_map(|o| {
                        id.components
                            .iter()
                            .map(move |c| id.mahalanobis(&o.mean, &c.mean))
                    })
                    .fold(f64::INFINITY, f64::min),
            ),
            _ => None,
        }
    }

    /// The desk-scale default: two in-distribution components at `±2 e1`,
    /// OOD component at `4 e2`, covariance `0.25 I`, unit Gaussian features with `B = 4`.
    pub fn desk_default(dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config(
                "the default population needs dim >= 2".into(),
            ));
        }
        let axis = |i: usize, v: f64| {
            let mut m = DVector::zeros(dim);
            m[i] = v;
            m
        };
        let cov = DMatrix::identity(dim, dim) * 0.25;
        let theta = GaussianMixture::new(
            vec![
                MixtureComponent {
                    weight: 0.5,
                    mean: axis(0, 2.0),
                },
                MixtureComponent {
                    weight: 0.5,
                    mean: axis(0, -2.0),
                },
            ],
            cov.clone(),
        )?;
        let ood = GaussianMixture::new(
            vec![MixtureComponent {
                weight: 1.0,
                mean: axis(1, 4.0),
            }],
            cov,
        )?;
        let spec = Self {
            dim,
            features: FeatureDist::IsotropicGaussian { sigma: 1.0 },
            norm_bound: 4.0,
            theta: ThetaDist::Mixture(theta),
            ood_theta: ThetaDist::Mixture(ood),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// One-dimensional Rademacher features with `tanh(theta / 2)` uniform on `(-1, 1)`.
    pub fn rademacher_1d() -> Self {
        Self {
            dim: 1,
            features: FeatureDist::Rademacher,
            norm_bound: 1.0,
            theta: ThetaDist::TanhUniform { dim: 1 },
            ood_theta: ThetaDist::TanhUniform { dim: 1 },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn logistic_values() {
        assert_eq!(logistic(0.0), 0.5);
        // 1 - 1e-300 rounds to 1.0 in double precision
        let s = logistic(710.0);
        assert!(s.is_finite() && (1.0 - f64::EPSILON..=1.0).contains(&s));
        assert!(logistic(-710.0) >= 0.0);
        assert_relative_eq!(logistic(3f64.ln()), 0.75, epsilon = 1e-15);
    }

    #[test]
    fn logistic_matches_naive_formula() {
        let mut x: f64 = -30.0;
        while x <= 30.0 {
            let naive = 1.0 / (1.0 + (-x).exp());
            assert!(((logistic(x) - naive) / naive).abs() <= 1e-14, "x = {x}");
            x += 0.137;
        }
    }

    #[test]
    fn bt_examples() {
        let th = RewardParam::new(vec![3.0, -1.0]).unwrap();
        let orth = FeatureDiff::new(vec![1.0, 3.0]);
        assert_eq!(bt_prob(&orth, &th).unwrap(), 0.5);
        assert_eq!(expected_choice(&orth, &th).unwrap(), 0.0);

        let e1 = FeatureDiff::new(vec![1.0, 0.0]);
        let th2 = RewardParam::new(vec![2.0, 0.0]).unwrap();
        // 1 / (1 + e^-2)
        assert_relative_eq!(
            bt_prob(&e1, &th2).unwrap(),
            0.880_797_077_977_882_3,
            epsilon = 1e-15
        );
        assert_relative_eq!(
            expected_choice(&e1, &th2).unwrap(),
            0.761_594_155_955_764_9,
            epsilon = 1e-15
        );
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let th = RewardParam::new(vec![1.0, 2.0, 3.0]).unwrap();
        let phi = FeatureDiff::new(vec![1.0, 0.0]);
        assert!(matches!(
            bt_prob(&phi, &th),
            Err(Error::DimensionMismatch {
                expected: 2,
                found: 3
            })
        ));
        assert!(expected_choice(&phi, &th).is_err());
    }

    #[test]
    fn non_finite_theta_rejected() {
        assert!(RewardParam::new(vec![f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn bt_symmetry_and_tanh_identity(a in -20.0f64..20.0, b in -20.0f64..20.0, c in -3.0f64..3.0) {
            let th = RewardParam::new(vec![a, b]).unwrap();
            let phi = FeatureDiff::new(vec![c, 0.5 * c + 0.1]);
            let neg = FeatureDiff::new(vec![-c, -(0.5 * c + 0.1)]);
            let p = bt_prob(&phi, &th).unwrap();
            prop_assert!((p + bt_prob(&neg, &th).unwrap() - 1.0).abs() <= 1e-15);
            prop_assert!((2.0 * p - 1.0 - expected_choice(&phi, &th).unwrap()).abs() <= 1e-12);
            prop_assert!((expected_choice(&neg, &th).unwrap() + expected_choice(&phi, &th).unwrap()).abs() <= 1e-15);
        }

        #[test]
        fn logistic_increasing(x in -35.0f64..35.0, dx in 1e-3f64..5.0) {
            prop_assert!(logistic(x + dx) >= logistic(x));
            if x.abs() < 20.0 {
                prop_assert!(logistic(x + dx) > logistic(x));
            }
        }
    }

    #[test]
    fn mixture_validation() {
        let bad_w = GaussianMixture::new(
            vec![MixtureComponent {
                weight: 0.7,
                mean: DVector::zeros(2),
            }],
            DMatrix::identity(2, 2),
        );
        assert!(bad_w.is_err());
        let not_pd = GaussianMixture::single(vec![0.0, 0.0], -1.0);
        assert!(not_pd.is_err());
    }

    #[test]
    fn default_spec_is_valid_and_separated() {
        let spec = PopulationSpec::desk_default(5).unwrap();
        // |(0,4) - (2,0)| = sqrt(20) over sd 0.5
        assert_relative_eq!(
            spec.ood_separation().unwrap(),
            20f64.sqrt() / 0.5,
            epsilon = 1e-12
        );
    }

    #[test]
    fn ood_too_close_rejected() {
        let mut spec = PopulationSpec::desk_default(2).unwrap();
        spec.ood_theta = ThetaDist::Mixture(GaussianMixture::single(vec![2.0, 1.0], 0.25).unwrap());
        assert!(spec.validate().is_err());
    }
}
