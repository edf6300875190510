//! Drift-diffusion first-passage sampling with absorbing boundaries at `±1/2`.
//!
//! Two samplers are provided. [`simulate_ddm`] walks the process with
//! Euler–Maruyama steps. [`sample_first_passage`] draws the hitting time exactly
//! from its eigen-expansion: with symmetric boundaries the choice is independent
//! of the time, `P(up) = sigma(v)`, and the time has Laplace transform
//! `cosh(v/2) / cosh(sqrt(v^2 + 2s) / 2)`, which factors into a sum of independent
//! exponentials with rates `lambda_k = ((2k+1)^2 pi^2 + v^2) / 2`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Binomial, Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::model::logistic;

/// Absorbing boundary level.
pub const BOUNDARY: f64 = 0.5;

/// Consecutive truncated paths tolerated before giving up.
pub const MAX_RETRIES: u32 = 100;

/// Sampler used for bulk generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DdmMethod {
    /// Exact eigen-expansion sampler.
    Series,
    /// Euler–Maruyama walk, one path per annotator.
    Euler,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdmConfig {
    /// Euler step in seconds.
    pub dt: f64,
    /// Truncation horizon in seconds.
    pub max_time: f64,
    /// Test for boundary crossings between grid points with the Brownian-bridge law.
    pub bridge: bool,
    pub method: DdmMethod,
}

impl Default for DdmConfig {
    fn default() -> Self {
        Self {
            dt: 1e-4,
            max_time: 50.0,
            bridge: true,
            method: DdmMethod::Series,
        }
    }
}

impl DdmConfig {
    pub fn euler(dt: f64) -> Self {
        Self {
            dt,
            method: DdmMethod::Euler,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.max_time > 0.0 && self.max_time.is_finite()) {
            return Err(Error::Config("dt and max_time must be positive".into()));
        }
        if self.dt > 1e-3 * self.max_time {
            return Err(Error::Config(format!(
                "dt = {} exceeds 1e-3 * max_time = {}",
                self.dt,
                1e-3 * self.max_time
            )));
        }
        Ok(())
    }
}

/// Probability of absorption at the upper boundary, `sigma(v)`.
pub fn ddm_choice_prob(drift: f64) -> f64 {
    logistic(drift)
}

/// Mean first-passage time `tanh(v/2) / (2v)`, and `1/4` at `v = 0`.
pub fn ddm_expected_time(drift: f64) -> f64 {
    let v = drift.abs();
    if v < 1e-4 {
        let v2 = v * v;
        0.25 * (1.0 - v2 / 12.0 + v2 * v2 / 120.0)
    } else {
        (0.5 * v).tanh() / (2.0 * v)
    }
}

/// Variance of the first-passage time, `[2 tanh(v/2) - v sech^2(v/2)] / (4 v^3)`.
pub fn ddm_time_variance(drift: f64) -> f64 {
    let v = drift.abs();
    if v < 1e-2 {
        let v2 = v * v;
        // next term is O(v^4) ~ 1e-10
        1.0 / 24.0 - v2 / 120.0
    } else {
        let sech = 1.0 / (0.5 * v).cosh();
        (2.0 * (0.5 * v).tanh() - v * sech * sech) / (4.0 * v * v * v)
    }
}

/// One Euler–Maruyama path started at 0. Returns `(z, t)` with `z = ±1`.
///
/// Paths still inside the boundaries at `max_time` are discarded and redrawn.
pub fn simulate_ddm<R: Rng + ?Sized>(
    drift: f64,
    cfg: &DdmConfig,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if !drift.is_finite() {
        return Err(Error::Simulation(format!("non-finite drift {drift}")));
    }
    let a = BOUNDARY;
    let dt = cfg.dt;
    let sd = dt.sqrt();
    let mu = drift * dt;
    let max_steps = (cfg.max_time / dt).ceil() as u64;
    // crossing probabilities below exp(-20) are ignored
    let bridge_window = 10.0 * dt;
    for _ in 0..=MAX_RETRIES {
        let mut x = 0.0f64;
        for step in 1..=max_steps {
            let eps: f64 = rng.sample(StandardNormal);
            let x1 = x + mu + sd * eps;
            let t = step as f64 * dt;
            if x1 >= a {
                return Ok((1.0, t));
            }
            if x1 <= -a {
                return Ok((-1.0, t));
            }
            if cfg.bridge {
                let gu = (a - x) * (a - x1);
                let gl = (a + x) * (a + x1);
                if gu < bridge_window || gl < bridge_window {
                    let pu = if gu < bridge_window {
                        (-2.0 * gu / dt).exp()
                    } else {
                        0.0
                    };
                    let pl = if gl < bridge_window {
                        (-2.0 * gl / dt).exp()
                    } else {
                        0.0
                    };
                    let u: f64 = rng.random();
                    if u < pu {
                        return Ok((1.0, t));
                    }
                    if u < pu + pl {
                        return Ok((-1.0, t));
                    }
                }
            }
            x = x1;
        }
    }
    Err(Error::Simulation(format!(
        "{} consecutive paths truncated at {} s (drift {drift})",
        MAX_RETRIES + 1,
        cfg.max_time
    )))
}

/// Number of explicit exponential terms kept by the series sampler.
fn series_terms(drift: f64) -> usize {
    (16 + (drift.abs() / (2.0 * PI)).ceil() as usize).min(256)
}

/// Mean over `k` independent annotators of `(z, t)`, drawn exactly.
///
/// `z` is a rescaled binomial. The time mean is `(1/k) sum_j Gamma(k, 1) / lambda_j`
/// over the leading terms plus a Gamma variable matched to the first two moments
/// of the remaining terms.
pub fn sample_first_passage<R: Rng + ?Sized>(
    drift: f64,
    k: u32,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if k == 0 {
        return Err(Error::Config("annotator count must be positive".into()));
    }
    if !drift.is_finite() {
        return Err(Error::Simulation(format!("non-finite drift {drift}")));
    }
    let kf = k as f64;
    let p = ddm_choice_prob(drift);
    let ups = Binomial::new(k as u64, p)
        .map_err(|e| Error::Simulation(format!("binomial draw: {e}")))?
        .sample(rng) as f64;
    let z = (2.0 * ups - kf) / kf;

    let v2 = drift * drift;
    let terms = series_terms(drift);
    let shape = Gamma::new(kf, 1.0).map_err(|e| Error::Simulation(format!("gamma draw: {e}")))?;
    let mut total = 0.0;
    let mut head_mean = 0.0;
    let mut head_var = 0.0;
    for j in 0..terms {
        let odd = (2 * j + 1) as f64;
        let rate = 0.5 * (odd * odd * PI * PI + v2);
        let inv = 1.0 / rate;
        head_mean += inv;
        head_var += inv * inv;
        total += shape.sample(rng) * inv;
    }
    let tail_mean = ddm_expected_time(drift) - head_mean;
    let tail_var = ddm_time_variance(drift) - head_var;
    if tail_mean > 0.0 && tail_var > 0.0 {
        // sum of k tails: mean k*m, variance k*s2
        let tail = Gamma::new(kf * tail_mean * tail_mean / tail_var, tail_var / tail_mean)
            .map_err(|e| Error::Simulation(format!("gamma draw: {e}")))?;
        total += tail.sample(rng);
    }
    Ok((z, total / kf))
}

/// Mean of `k` annotators' `(z, t)` using the configured sampler.
pub fn sample_aggregate<R: Rng + ?Sized>(
    drift: f64,
    k: u32,
    cfg: &DdmConfig,
    rng: &mut R,
) -> Result<(f64, f64)> {
    match cfg.method {
        DdmMethod::Series => sample_first_passage(drift, k, rng),
        DdmMethod::Euler => {
            if k == 0 {
                return Err(Error::Config("annotator count must be positive".into()));
            }
            let (mut zs, mut ts) = (0.0, 0.0);
            for _ in 0..k {
                let (z, t) = simulate_ddm(drift, cfg, rng)?;
                zs += z;
                ts += t;
            }
            Ok((zs / k as f64, ts / k as f64))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngSeed;
    use approx::assert_relative_eq;

    #[test]
    fn closed_forms() {
        assert_eq!(ddm_choice_prob(0.0), 0.5);
        assert_eq!(ddm_expected_time(0.0), 0.25);
        // tanh(1)/4
        assert_relative_eq!(
            ddm_expected_time(2.0),
            0.190_398_538_988_941_2,
            epsilon = 1e-15
        );
        assert_relative_eq!(
            ddm_choice_prob(2.0),
            0.880_797_077_977_882_3,
            epsilon = 1e-15
        );
        for v in [0.3, 1.0, 7.5] {
            assert_eq!(ddm_expected_time(v), ddm_expected_time(-v));
        }
        assert_relative_eq!(ddm_time_variance(0.0), 1.0 / 24.0);
    }

    #[test]
    fn expected_time_continuous_at_switch() {
        let below = ddm_expected_time(0.999_999e-4);
        let above = ddm_expected_time(1.000_001e-4);
        assert!((below - above).abs() < 1e-12);
        let vb = ddm_time_variance(0.999_999e-2);
        let va = ddm_time_variance(1.000_001e-2);
        assert!((vb - va).abs() < 1e-9);
    }

    #[test]
    fn series_sums_match_closed_forms() {
        // sum over all k of 1/lambda_k and 1/lambda_k^2, summed far out
        for v in [0.0f64, 0.5, 2.0, 9.0] {
            let (mut m, mut s) = (0.0, 0.0);
            for j in (0..2_000_000).rev() {
                let odd = (2 * j + 1) as f64;
                let inv = 2.0 / (odd * odd * PI * PI + v * v);
                m += inv;
                s += inv * inv;
            }
            assert_relative_eq!(m, ddm_expected_time(v), max_relative = 1e-6);
            assert_relative_eq!(s, ddm_time_variance(v), max_relative = 1e-9);
        }
    }

    #[test]
    fn series_sampler_moments() {
        let mut rng = RngSeed::new(5).rng();
        for v in [0.0, 1.5] {
            let n = 100_000;
            let (mut st, mut st2, mut sz) = (0.0, 0.0, 0.0);
            for _ in 0..n {
                let (z, t) = sample_first_passage(v, 1, &mut rng).unwrap();
                assert!(t > 0.0 && (z == 1.0 || z == -1.0));
                st += t;
                st2 += t * t;
                sz += z;
            }
            let nf = n as f64;
            let mean = st / nf;
            let var = st2 / nf - mean * mean;
            let se = (ddm_time_variance(v) / nf).sqrt();
            assert!(
                (mean - ddm_expected_time(v)).abs() < 4.0 * se,
                "v={v} mean={mean}"
            );
            assert!(
                (var / ddm_time_variance(v) - 1.0).abs() < 0.05,
                "v={v} var={var}"
            );
            let pz = 2.0 * ddm_choice_prob(v) - 1.0;
            assert!((sz / nf - pz).abs() < 4.0 * (1.0 / nf).sqrt());
        }
    }

    #[test]
    fn aggregated_series_variance_scales() {
        let mut rng = RngSeed::new(9).rng();
        let k = 50;
        let n = 20_000;
        let v = 1.0;
        let ts: Vec<f64> = (0..n)
            .map(|_| sample_first_passage(v, k, &mut rng).unwrap().1)
            .collect();
        let mean = ts.iter().sum::<f64>() / n as f64;
        let var = ts.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(
            (mean - ddm_expected_time(v)).abs()
                < 4.0 * (ddm_time_variance(v) / (k * n) as f64).sqrt()
        );
        assert!((var * k as f64 / ddm_time_variance(v) - 1.0).abs() < 0.05);
    }

    #[test]
    fn euler_and_series_agree() {
        let mut rng = RngSeed::new(3).rng();
        let cfg = DdmConfig::euler(1e-3);
        let n = 20_000;
        let v = 1.0;
        let mut st = 0.0;
        for _ in 0..n {
            st += simulate_ddm(v, &cfg, &mut rng).unwrap().1;
        }
        let se = (ddm_time_variance(v) / n as f64).sqrt();
        // residual bridge bias at dt = 1e-3 is below dt
        assert!((st / n as f64 - ddm_expected_time(v)).abs() < 4.0 * se + cfg.dt);
    }

    #[test]
    fn truncation_is_an_error() {
        let cfg = DdmConfig {
            dt: 1e-4,
            max_time: 0.1,
            bridge: false,
            method: DdmMethod::Euler,
        };
        let mut rng = RngSeed::new(1).rng();
        // mean exit time at v=0 is 1/4, so paths often survive to 0.1; retrying eventually succeeds
        assert!(simulate_ddm(0.0, &cfg, &mut rng).is_ok());
        let tiny = DdmConfig {
            dt: 1e-6,
            max_time: 1e-3,
            bridge: false,
            method: DdmMethod::Euler,
        };
        assert!(matches!(
            simulate_ddm(0.0, &tiny, &mut rng),
            Err(Error::Simulation(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(DdmConfig::default().validate().is_ok());
        let bad = DdmConfig {
            dt: 0.1,
            max_time: 50.0,
            ..DdmConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
