//! Ground truths: the preference moment map, the response-time population
//! minimizer, feature second moments and the one-dimensional counterexample.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::model::{
    logistic, tanh_half, Demonstration, FeatureDist, LabelMode, PopulationSpec, RewardParam,
};
use crate::numerics::{bisect, chi2_cdf, GaussLegendre, RootCertificate};
use crate::prompts::label;
use crate::rng::RngSeed;
use crate::synthgen::{sample_aggregate, sample_feature, sample_theta, DdmConfig, ThetaSource};

/// How `mu(theta) = E[tanh(phi^T theta / 2) phi]` is evaluated.
#[derive(Debug, Clone, PartialEq)]
pub enum MomentMap {
    /// One-dimensional Rademacher features: `mu(theta) = tanh(theta / 2)`.
    ExactRademacher1d,
    /// Sample mean over features drawn from `spec`.
    MonteCarlo {
        spec: PopulationSpec,
        samples: usize,
    },
}

/// A vector estimate with per-coordinate standard errors (zero when exact).
#[derive(Debug, Clone, PartialEq)]
pub struct VectorEstimate {
    pub mean: DVector<f64>,
    pub se: DVector<f64>,
}

pub fn mu_of_theta<R: Rng + ?Sized>(
    map: &MomentMap,
    theta: &RewardParam,
    rng: &mut R,
) -> Result<VectorEstimate> {
    match map {
        MomentMap::ExactRademacher1d => {
            check_dim(1, theta.dim())?;
            Ok(VectorEstimate {
                mean: DVector::from_element(1, tanh_half(theta.as_vector()[0])),
                se: DVector::zeros(1),
            })
        }
        MomentMap::MonteCarlo { spec, samples } => {
            check_dim(spec.dim, theta.dim())?;
            if *samples < 2 {
                return Err(Error::Config(
                    "Monte Carlo moment needs at least two samples".into(),
                ));
            }
            let d = spec.dim;
            let mut s = DVector::zeros(d);
            let mut s2 = DVector::zeros(d);
            for _ in 0..*samples {
                let phi = sample_feature(spec, rng)?;
                let w = tanh_half(phi.logit(theta)?);
                let x = phi.as_vector() * w;
                s2 += x.component_mul(&x);
                s += x;
            }
            let n = *samples as f64;
            let mean = s / n;
            let var = (s2 / n - mean.component_mul(&mean)) * (n / (n - 1.0));
            let se = var.map(|v| (v.max(0.0) / n).sqrt());
            Ok(VectorEstimate { mean, se })
        }
    }
}

/// Label-weighted feature mean of a demonstration set.
pub fn empirical_moment(demos: &[Demonstration], mode: LabelMode) -> Result<DVector<f64>> {
    let first = demos
        .first()
        .ok_or_else(|| Error::Data("empirical moment of an empty set".into()))?;
    let d = first.phi.dim();
    let mut s = DVector::zeros(d);
    for demo in demos {
        check_dim(d, demo.phi.dim())?;
        s.axpy(label(&demo.obs, mode)?, demo.phi.as_vector(), 1.0);
    }
    Ok(s / demos.len() as f64)
}

/// `Sigma^{-1}`, the unique minimizer of the limiting regression loss.
pub fn population_minimizer_rt(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = sigma.nrows();
    if sigma.ncols() != d || d == 0 {
        return Err(Error::Data(
            "second moment must be a nonempty square matrix".into(),
        ));
    }
    if (sigma - sigma.transpose()).amax() > 1e-12 * sigma.amax().max(1.0) {
        return Err(Error::Data("second moment is not symmetric".into()));
    }
    let chol = sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Data("second moment is not positive definite".into()))?;
    let inv = chol.inverse();
    let u = (&inv + inv.transpose()) * 0.5;
    let resid = (&u * sigma - DMatrix::identity(d, d)).norm();
    if resid > 1e-10 * d as f64 {
        return Err(Error::Data(format!(
            "second moment too ill-conditioned to invert (residual {resid:e})"
        )));
    }
    Ok(u)
}

/// `E[phi phi^T]`, exact or estimated.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondMoment {
    pub matrix: DMatrix<f64>,
    /// Entrywise standard errors for Monte Carlo estimates.
    pub se: Option<DMatrix<f64>>,
}

/// Closed form when one exists. Rejection at the norm bound is accounted for:
/// Gaussian features use the truncated moment
/// `sigma^2 F_{d+2}(B^2/sigma^2) / F_d(B^2/sigma^2) I` with `F_k` the chi-squared CDF.
pub fn closed_form_second_moment(spec: &PopulationSpec) -> Option<DMatrix<f64>> {
    let d = spec.dim;
    let b = spec.norm_bound;
    let scale = match spec.features {
        FeatureDist::IsotropicGaussian { sigma } => {
            let s2 = sigma * sigma;
            if b.is_infinite() {
                s2
            } else {
                let c = b * b / s2;
                let denom = chi2_cdf(d as f64, c);
                if denom <= 0.0 {
                    return None;
                }
                s2 * chi2_cdf(d as f64 + 2.0, c) / denom
            }
        }
        FeatureDist::UniformCube { half_width } => {
            if b < half_width * (d as f64).sqrt() {
                return None;
            }
            half_width * half_width / 3.0
        }
        FeatureDist::Rademacher => 1.0,
    };
    Some(DMatrix::identity(d, d) * scale)
}

pub fn feature_second_moment_mc<R: Rng + ?Sized>(
    spec: &PopulationSpec,
    samples: usize,
    rng: &mut R,
) -> Result<SecondMoment> {
    if samples < 2 {
        return Err(Error::Config(
            "Monte Carlo moment needs at least two samples".into(),
        ));
    }
    let d = spec.dim;
    let mut s = DMatrix::zeros(d, d);
    let mut s2 = DMatrix::zeros(d, d);
    for _ in 0..samples {
        let v = sample_feature(spec, rng)?.into_vector();
        let outer = &v * v.transpose();
        s2 += outer.component_mul(&outer);
        s += outer;
    }
    let n = samples as f64;
    let mean = s / n;
    let var = (s2 / n - mean.component_mul(&mean)) * (n / (n - 1.0));
    let se = var.map(|v| (v.max(0.0) / n).sqrt());
    Ok(SecondMoment {
        matrix: mean,
        se: Some(se),
    })
}

/// Closed form when available, otherwise `10^5` Monte Carlo draws.
pub fn feature_second_moment<R: Rng + ?Sized>(
    spec: &PopulationSpec,
    rng: &mut R,
) -> Result<SecondMoment> {
    match closed_form_second_moment(spec) {
        Some(matrix) => Ok(SecondMoment { matrix, se: None }),
        None => feature_second_moment_mc(spec, 100_000, rng),
    }
}

/// Quadrature points used by the counterexample integral.
pub const COUNTEREXAMPLE_NODES: usize = 128;

/// `I(u) = 1/2 int_{-1}^{1} m tanh(m u / 4) dm`.
#[derive(Debug, Clone)]
pub struct CounterexampleIntegral {
    rule: GaussLegendre,
}

impl CounterexampleIntegral {
    pub fn new(q: usize) -> Result<Self> {
        if q < 64 {
            return Err(Error::Config(format!(
                "counterexample quadrature needs at least 64 nodes, got {q}"
            )));
        }
        Ok(Self {
            rule: GaussLegendre::new(q),
        })
    }

    pub fn eval(&self, u: f64) -> f64 {
        0.5 * self
            .rule
            .integrate(-1.0, 1.0, |m| m * (0.25 * m * u).tanh())
    }
}

impl Default for CounterexampleIntegral {
    fn default() -> Self {
        Self::new(COUNTEREXAMPLE_NODES).expect("default node count is valid")
    }
}

pub fn counterexample_i(u: f64, q: usize) -> Result<f64> {
    Ok(CounterexampleIntegral::new(q)?.eval(u))
}

/// Root of `I(u) = 1/3` on `(0, 6)` by bisection.
pub fn counterexample_ustar() -> Result<RootCertificate> {
    let integral = CounterexampleIntegral::default();
    bisect(|u| integral.eval(u) - 1.0 / 3.0, 0.0, 6.0, 1e-12)
}

/// Independent root finder for `I(u) = 1/3`: a grid scan of `[0, 6]` for the
/// sign change, refined by the Illinois variant of regula falsi.
pub fn counterexample_ustar_scan(step: f64) -> Result<f64> {
    let integral = CounterexampleIntegral::default();
    let f = |u: f64| integral.eval(u) - 1.0 / 3.0;
    let cells = (6.0 / step).ceil() as usize;
    let mut a = 0.0;
    let mut fa = f(a);
    for i in 1..=cells {
        let b = (i as f64 * step).min(6.0);
        let fb = f(b);
        if fa * fb <= 0.0 {
            return illinois(f, a, b, fa, fb);
        }
        a = b;
        fa = fb;
    }
    Err(Error::Internal(
        "I(u) - 1/3 has no sign change on [0, 6]".into(),
    ))
}

fn illinois<F: Fn(f64) -> f64>(
    f: F,
    mut a: f64,
    mut b: f64,
    mut fa: f64,
    mut fb: f64,
) -> Result<f64> {
    let mut side = 0i8;
    for _ in 0..200 {
        if fb == fa {
            break;
        }
        let c = (a * fb - b * fa) / (fb - fa);
        let fc = f(c);
        if fc == 0.0 || (b - a).abs() < 1e-14 {
            return Ok(c);
        }
        if fc * fb > 0.0 {
            b = c;
            fb = fc;
            if side == -1 {
                fa *= 0.5;
            }
            side = -1;
        } else {
            a = c;
            fa = fc;
            if side == 1 {
                fb *= 0.5;
            }
            side = 1;
        }
        if (fc).abs() < 1e-15 {
            return Ok(c);
        }
    }
    Ok(if fa.abs() < fb.abs() { a } else { b })
}

/// Law of `m = tanh(theta / 2)` for the one-dimensional Rademacher setup.
#[derive(Debug, Clone, PartialEq)]
pub enum BinaryThetaLaw {
    /// `m ~ U(-1, 1)`.
    Uniform,
    PointMass(f64),
    /// Atoms `(m, weight)`; weights sum to one.
    Discrete(Vec<(f64, f64)>),
}

impl BinaryThetaLaw {
    fn atoms(&self) -> Result<Vec<(f64, f64)>> {
        let atoms = match self {
            BinaryThetaLaw::Uniform => return Ok(Vec::new()),
            BinaryThetaLaw::PointMass(m) => vec![(*m, 1.0)],
            BinaryThetaLaw::Discrete(a) => a.clone(),
        };
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        if (total - 1.0).abs() > 1e-9 || atoms.iter().any(|a| a.1 < 0.0) {
            return Err(Error::Config(
                "atom weights must be nonnegative and sum to 1".into(),
            ));
        }
        if atoms.iter().any(|a| !(a.0.abs() < 1.0)) {
            return Err(Error::Config("atoms must lie in (-1, 1)".into()));
        }
        if atoms.iter().all(|a| a.0 == 0.0 || a.1 == 0.0) {
            return Err(Error::Config(
                "law is concentrated at m = 0; every U is a minimizer".into(),
            ));
        }
        Ok(atoms)
    }
}

/// Population minimizer of the binary cross-entropy loss in the one-dimensional
/// Rademacher setup with `N -> infinity`: the root of
/// `E[m (tanh(m u / 2) - m)] = 0`. For uniform `m` this is `I(2u) = 1/3`.
pub fn binary_population_minimizer_1d(law: &BinaryThetaLaw) -> Result<RootCertificate> {
    let integral = CounterexampleIntegral::default();
    let atoms = law.atoms()?;
    let g = |u: f64| match law {
        BinaryThetaLaw::Uniform => integral.eval(2.0 * u) - 1.0 / 3.0,
        _ => atoms
            .iter()
            .map(|&(m, w)| w * m * ((0.5 * m * u).tanh() - m))
            .sum(),
    };
    let mut hi = 8.0;
    while g(hi) <= 0.0 {
        hi *= 2.0;
        if hi > 1e9 {
            return Err(Error::Internal("stationarity condition has no root".into()));
        }
    }
    bisect(g, 0.0, hi, 1e-12)
}

/// Exact minimizer of the finite-`N` binary loss in the one-dimensional
/// Rademacher setup with uniform `m`.
///
/// Given `m`, the statistic `N s_hat` is `2B - N` with `B ~ Bin(N, (1+m)/2)`, and the
/// query term reduces to `sigma(s_hat U) - (1+m)/2`. The stationarity condition is
/// `sum_B s_B (A_B sigma(s_B U) - C_B) = 0` with `A_B = 1/2 int pmf_B dm` and
/// `C_B = 1/2 int pmf_B (1+m)/2 dm`, integrated by a Gauss–Legendre rule that is
/// exact for these polynomials in `m`.
pub fn binary_finite_n_minimizer_1d(n: usize) -> Result<RootCertificate> {
    let coeffs = FiniteNCoefficients::new(n)?;
    bisect(|u| coeffs.gradient(u), 0.0, 100.0, 1e-12)
}

/// Precomputed `(s_B, A_B, C_B)` for [`binary_finite_n_minimizer_1d`].
#[derive(Debug, Clone)]
pub struct FiniteNCoefficients {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub c: Vec<f64>,
}

impl FiniteNCoefficients {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("N must be positive".into()));
        }
        let rule = GaussLegendre::new(n / 2 + 8);
        let nf = n as f64;
        let ln_binom: Vec<f64> = (0..=n)
            .map(|b| statrs::function::factorial::ln_binomial(n as u64, b as u64))
            .collect();
        let mut a = vec![0.0; n + 1];
        let mut c = vec![0.0; n + 1];
        for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
            let p = 0.5 * (1.0 + x);
            let (lp, lq) = (p.ln(), (1.0 - p).ln());
            for b in 0..=n {
                let pmf = (ln_binom[b] + b as f64 * lp + (n - b) as f64 * lq).exp();
                a[b] += 0.5 * w * pmf;
                c[b] += 0.5 * w * pmf * p;
            }
        }
        let s = (0..=n).map(|b| (2.0 * b as f64 - nf) / nf).collect();
        Ok(Self { s, a, c })
    }

    /// Derivative of the loss in `U`.
    pub fn gradient(&self, u: f64) -> f64 {
        self.s
            .iter()
            .zip(self.a.iter().zip(&self.c))
            .map(|(&s, (&a, &c))| s * (a * logistic(s * u) - c))
            .sum()
    }
}

/// Asymptotic binary prediction versus the truth for a new type at `phi_q = +1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImpossibilityPoint {
    pub theta_new: f64,
    pub predicted: f64,
    pub truth: f64,
    pub tv: f64,
}

/// `predicted = sigma(tanh(theta/2) u_bar)`, `truth = sigma(theta)`, `tv = |predicted - truth|`.
pub fn impossibility_gap(theta_new: f64, u_bar: f64) -> ImpossibilityPoint {
    let predicted = logistic(tanh_half(theta_new) * u_bar);
    let truth = logistic(theta_new);
    ImpossibilityPoint {
        theta_new,
        predicted,
        truth,
        tv: (predicted - truth).abs(),
    }
}

pub fn write_impossibility_csv<W: Write>(writer: W, points: &[ImpossibilityPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["theta_new", "predicted", "true", "tv"])?;
    for p in points {
        w.write_record([
            p.theta_new.to_string(),
            p.predicted.to_string(),
            p.truth.to_string(),
            p.tv.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Moments that determine the finite-`(N, K)` minimizer of the regression loss.
///
/// With `m(theta) = E[r phi | theta]` for the ratio label `r = z/t` of a
/// `K`-annotator comparison, `P = E[m m^T]`, `Q = E[r^2 phi phi^T]` and
/// `Sigma = E[phi phi^T]`, the stationarity condition reads
/// `((1 - 1/N) P + Q/N) U Sigma = P`, hence
/// `U_{N,K} - Sigma^{-1} = G_N^{-1} (P - Q) Sigma^{-1} / N`.
#[derive(Debug, Clone, PartialEq)]
pub struct RtMoments {
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub k: u32,
    pub n_theta: usize,
}

impl RtMoments {
    /// `P` from two independent comparisons per sampled type, `Q` from both.
    pub fn estimate(
        spec: &PopulationSpec,
        k: u32,
        cfg: &DdmConfig,
        n_theta: usize,
        sigma: DMatrix<f64>,
        seed: RngSeed,
    ) -> Result<Self> {
        if n_theta == 0 {
            return Err(Error::Config(
                "moment estimate needs at least one type".into(),
            ));
        }
        let d = spec.dim;
        check_dim(d, sigma.nrows())?;
        const CHUNK: usize = 4096;
        let chunks = n_theta.div_ceil(CHUNK);
        let parts: Vec<(DMatrix<f64>, DMatrix<f64>)> = (0..chunks)
            .into_par_iter()
            .map(|c| -> Result<_> {
                let mut p = DMatrix::zeros(d, d);
                let mut q = DMatrix::zeros(d, d);
                let lo = c * CHUNK;
                let hi = (lo + CHUNK).min(n_theta);
                for i in lo..hi {
                    let mut rng = seed.substream(i as u64).rng();
                    let theta = sample_theta(spec, ThetaSource::InDist, &mut rng);
                    let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Result<DVector<f64>> {
                        let phi = sample_feature(spec, rng)?;
                        let (z, t) = sample_aggregate(phi.logit(&theta)?, k, cfg, rng)?;
                        Ok(phi.into_vector() * (z / t))
                    };
                    let a = draw(&mut rng)?;
                    let b = draw(&mut rng)?;
                    let ab = &a * b.transpose();
                    p += (&ab + ab.transpose()) * 0.5;
                    q += (&a * a.transpose() + &b * b.transpose()) * 0.5;
                }
                Ok((p, q))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = n_theta as f64;
        let (p, q) = parts.into_iter().fold(
            (DMatrix::zeros(d, d), DMatrix::zeros(d, d)),
            |(p, q), (a, b)| (p + a, q + b),
        );
        Ok(Self {
            p: p / n,
            q: q / n,
            sigma,
            k,
            n_theta,
        })
    }

    fn g(&self, n: usize) -> DMatrix<f64> {
        let nf = n as f64;
        &self.p * (1.0 - 1.0 / nf) + &self.q / nf
    }

    /// `U_{N,K} - Sigma^{-1}`.
    pub fn deviation(&self, n: usize) -> Result<DMatrix<f64>> {
        if n == 0 {
            return Err(Error::Config("N must be positive".into()));
        }
        let g = self.g(n);
        let sigma_inv = population_minimizer_rt(&self.sigma)?;
        let lu = g.lu();
        let rhs = (&self.p - &self.q) * sigma_inv / n as f64;
        lu.solve(&rhs)
            .ok_or_else(|| Error::Internal("moment matrix G_N is singular".into()))
    }

    /// `U_{N,K} = G_N^{-1} P Sigma^{-1}`.
    pub fn minimizer(&self, n: usize) -> Result<DMatrix<f64>> {
        Ok(self.deviation(n)? + population_minimizer_rt(&self.sigma)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FeatureDiff;
    use crate::model::Observation;
    use approx::assert_relative_eq;

    #[test]
    fn exact_moment() {
        let mut rng = RngSeed::new(0).rng();
        let th = RewardParam::new(vec![2.0]).unwrap();
        let m = mu_of_theta(&MomentMap::ExactRademacher1d, &th, &mut rng).unwrap();
        assert_relative_eq!(m.mean[0], 0.761_594_155_955_764_9, epsilon = 1e-15);
        let zero = mu_of_theta(
            &MomentMap::ExactRademacher1d,
            &RewardParam::new(vec![0.0]).unwrap(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(zero.mean[0], 0.0);
        // compression: mu(4) != 2 mu(2)
        let m4 = mu_of_theta(
            &MomentMap::ExactRademacher1d,
            &RewardParam::new(vec![4.0]).unwrap(),
            &mut rng,
        )
        .unwrap();
        assert!((m4.mean[0] - 2.0 * m.mean[0]).abs() > 0.1);
    }

    #[test]
    fn mc_moment_matches_exact() {
        let mut rng = RngSeed::new(1).rng();
        let map = MomentMap::MonteCarlo {
            spec: PopulationSpec::rademacher_1d(),
            samples: 100_000,
        };
        for t in [2.0, -0.7] {
            let th = RewardParam::new(vec![t]).unwrap();
            let est = mu_of_theta(&map, &th, &mut rng).unwrap();
            // features are ±1, so tanh(phi theta/2) phi is constant
            assert!((est.mean[0] - (0.5 * t).tanh()).abs() <= 3.0 * est.se[0] + 1e-12);
        }
    }

    #[test]
    fn mc_moment_is_odd_and_bounded() {
        let spec = PopulationSpec::desk_default(3).unwrap();
        let map = MomentMap::MonteCarlo {
            spec,
            samples: 20_000,
        };
        let th = RewardParam::new(vec![1.0, -2.0, 0.5]).unwrap();
        let neg = RewardParam::new(vec![-1.0, 2.0, -0.5]).unwrap();
        let a = mu_of_theta(&map, &th, &mut RngSeed::new(2).rng()).unwrap();
        let b = mu_of_theta(&map, &neg, &mut RngSeed::new(2).rng()).unwrap();
        // same draws: exact negation
        assert!((a.mean.clone() + b.mean).amax() < 1e-12);
        assert!(a.mean.norm() <= 4.0);
    }

    #[test]
    fn empirical_moment_single() {
        let demos = vec![Demonstration {
            phi: FeatureDiff::new(vec![0.3, -1.0]),
            obs: Observation {
                z: 1.0,
                t: Some(0.5),
                k: 1,
            },
        }];
        assert_eq!(
            empirical_moment(&demos, LabelMode::Binary).unwrap(),
            DVector::from_vec(vec![0.3, -1.0])
        );
        assert_eq!(
            empirical_moment(&demos, LabelMode::ResponseTime).unwrap(),
            DVector::from_vec(vec![0.6, -2.0])
        );
        assert!(empirical_moment(&[], LabelMode::Binary).is_err());
    }

    #[test]
    fn rt_minimizer_inverse() {
        assert_eq!(
            population_minimizer_rt(&DMatrix::identity(3, 3)).unwrap(),
            DMatrix::identity(3, 3)
        );
        let u =
            population_minimizer_rt(&DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0])))
                .unwrap();
        assert_relative_eq!(
            u,
            DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 1.0])),
            epsilon = 1e-15
        );
        let not_pd = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            population_minimizer_rt(&not_pd),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn second_moments_closed_form() {
        assert_eq!(
            closed_form_second_moment(&PopulationSpec::rademacher_1d()).unwrap()[(0, 0)],
            1.0
        );
        let mut spec = PopulationSpec::desk_default(3).unwrap();
        spec.features = FeatureDist::IsotropicGaussian { sigma: 2.0 };
        spec.norm_bound = f64::INFINITY;
        assert_eq!(
            closed_form_second_moment(&spec).unwrap(),
            DMatrix::identity(3, 3) * 4.0
        );
        spec.features = FeatureDist::UniformCube { half_width: 0.5 };
        assert_relative_eq!(
            closed_form_second_moment(&spec).unwrap()[(1, 1)],
            0.25 / 3.0,
            epsilon = 1e-15
        );
        spec.norm_bound = 0.5;
        assert!(closed_form_second_moment(&spec).is_none());
    }

    #[test]
    fn second_moments_match_monte_carlo() {
        let mut rng = RngSeed::new(3).rng();
        // the truncation matters here: d=5, B=2 removes a large share of the mass
        let mut spec = PopulationSpec::desk_default(5).unwrap();
        spec.norm_bound = 2.0;
        for s in [spec.clone(), PopulationSpec::desk_default(5).unwrap()] {
            let exact = closed_form_second_moment(&s).unwrap();
            let mc = feature_second_moment_mc(&s, 100_000, &mut rng).unwrap();
            let se = mc.se.unwrap();
            for i in 0..5 {
                for j in 0..5 {
                    assert!(
                        (mc.matrix[(i, j)] - exact[(i, j)]).abs() <= 4.0 * se[(i, j)],
                        "({i},{j})"
                    );
                }
            }
        }
    }

    #[test]
    fn counterexample_integral() {
        assert_eq!(counterexample_i(0.0, 128).unwrap(), 0.0);
        assert!(counterexample_i(1.0, 32).is_err());
        let i = CounterexampleIntegral::default();
        let mut prev = i.eval(0.0);
        for j in 1..=100 {
            let v = i.eval(0.1 * j as f64);
            assert!(v > prev);
            prev = v;
        }
        assert!(i.eval(0.0) < 1.0 / 3.0 && i.eval(6.0) > 1.0 / 3.0);
        // small-u expansion: I(u) ~ u/4 * E[m^2] = u/12
        assert_relative_eq!(i.eval(1e-6), 1e-6 / 12.0, max_relative = 1e-9);
        // agrees with a 512-point rule
        let fine = CounterexampleIntegral::new(512).unwrap();
        for u in [0.5, 3.0, 5.2, 10.0] {
            assert!((i.eval(u) - fine.eval(u)).abs() < 1e-12);
        }
    }

    #[test]
    fn ustar_root() {
        let c = counterexample_ustar().unwrap();
        assert!(c.root > 0.0 && c.root < 6.0);
        assert!(c.is_valid(1e-10));
        assert!((CounterexampleIntegral::default().eval(c.root) - 1.0 / 3.0).abs() < 1e-9);
        let scan = counterexample_ustar_scan(1e-3).unwrap();
        assert!((scan - c.root).abs() < 1e-8);
        assert_relative_eq!(c.root, 5.199_363_816_628_644, epsilon = 1e-9);
    }

    #[test]
    fn binary_minimizer() {
        let uniform = binary_population_minimizer_1d(&BinaryThetaLaw::Uniform)
            .unwrap()
            .root;
        // equals half the root of I(u) = 1/3
        assert_relative_eq!(
            uniform,
            counterexample_ustar().unwrap().root / 2.0,
            epsilon = 1e-10
        );
        for m0 in [0.2, 0.5, 0.9, -0.6] {
            let u = binary_population_minimizer_1d(&BinaryThetaLaw::PointMass(m0))
                .unwrap()
                .root;
            assert_relative_eq!(u, 2.0 * f64::atanh(m0) / m0, epsilon = 1e-9);
        }
        assert!(binary_population_minimizer_1d(&BinaryThetaLaw::PointMass(0.0)).is_err());
        let two = BinaryThetaLaw::Discrete(vec![(0.5, 0.5), (-0.5, 0.5)]);
        assert_relative_eq!(
            binary_population_minimizer_1d(&two).unwrap().root,
            2.0 * f64::atanh(0.5) / 0.5,
            epsilon = 1e-9
        );
    }

    #[test]
    fn finite_n_coefficients_match_beta_integrals() {
        // int_0^1 C(N,B) p^B (1-p)^(N-B) dp = 1/(N+1), and with an extra p: (B+1)/((N+1)(N+2))
        for n in [1usize, 7, 64, 301] {
            let c = FiniteNCoefficients::new(n).unwrap();
            let nf = n as f64;
            for b in 0..=n {
                assert_relative_eq!(c.a[b], 1.0 / (nf + 1.0), max_relative = 1e-9);
                assert_relative_eq!(
                    c.c[b],
                    (b as f64 + 1.0) / ((nf + 1.0) * (nf + 2.0)),
                    max_relative = 1e-9
                );
            }
        }
    }

    #[test]
    fn finite_n_minimizer() {
        // N = 1: tanh(U/2) = 1/3
        let u1 = binary_finite_n_minimizer_1d(1).unwrap().root;
        assert_relative_eq!(u1, 2.0 * (1.0f64 / 3.0).atanh(), epsilon = 1e-10);
        let limit = binary_population_minimizer_1d(&BinaryThetaLaw::Uniform)
            .unwrap()
            .root;
        let u = binary_finite_n_minimizer_1d(1024).unwrap().root;
        assert!((u - limit).abs() < 0.02);
    }

    #[test]
    fn gap_properties() {
        let u = binary_population_minimizer_1d(&BinaryThetaLaw::Uniform)
            .unwrap()
            .root;
        assert_eq!(impossibility_gap(0.0, u).tv, 0.0);
        for t in [0.5, 3.0, 8.0, 9.75] {
            assert!((impossibility_gap(t, u).tv - impossibility_gap(-t, u).tv).abs() < 1e-15);
        }
        assert!(impossibility_gap(8.0, u).tv > 0.01);
    }

    #[test]
    fn rt_moments_limit_is_sigma_inverse() {
        let spec = PopulationSpec::desk_default(2).unwrap();
        let sigma = closed_form_second_moment(&spec).unwrap();
        let m = RtMoments::estimate(
            &spec,
            16,
            &DdmConfig::default(),
            20_000,
            sigma.clone(),
            RngSeed::new(4),
        )
        .unwrap();
        let inv = population_minimizer_rt(&sigma).unwrap();
        let e1 = m.deviation(10).unwrap().norm();
        let e2 = m.deviation(10_000).unwrap().norm();
        assert!(e2 < e1 / 100.0);
        assert!((m.minimizer(1_000_000).unwrap() - inv).norm() < 1e-4);
    }
}
