//! Single-layer linear attention with the restricted value and key-query blocks.
//!
//! `F = E + W_V E (E^T W_KQ E) / N` with `W_V = [[0, 0], [0, 1]]` and
//! `W_KQ = [[U, 0], [0, 0]]`. The query column's label readout is
//! `s_hat^T U phi_q` with `s_hat = (1/N) sum_l label_l phi_l`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use crate::error::{check_dim, Error, Result};
use crate::model::{logistic, LabelMode};
use crate::prompts::PromptMatrix;

/// Trainable block `U` with its Frobenius bound.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub u: DMatrix<f64>,
    pub radius: f64,
}

impl AttentionParams {
    pub fn new(u: DMatrix<f64>, radius: f64) -> Result<Self> {
        if u.nrows() != u.ncols() || u.nrows() == 0 {
            return Err(Error::Config(format!(
                "U must be square and nonempty, got {}x{}",
                u.nrows(),
                u.ncols()
            )));
        }
        if !(radius > 0.0) {
            return Err(Error::Config("Frobenius bound must be positive".into()));
        }
        if u.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data("U has non-finite entries".into()));
        }
        let norm = u.norm();
        if norm > radius * (1.0 + 1e-12) {
            return Err(Error::Config(format!(
                "‖U‖_F = {norm} exceeds the bound {radius}"
            )));
        }
        Ok(Self { u, radius })
    }

    pub fn zeros(d: usize, radius: f64) -> Result<Self> {
        Self::new(DMatrix::zeros(d, d), radius)
    }

    pub fn dim(&self) -> usize {
        self.u.nrows()
    }
}

/// Rescales `u` onto the Frobenius ball of radius `r` when it lies outside.
/// Returns whether the projection was active.
pub fn project_frobenius(u: &mut DMatrix<f64>, r: f64) -> bool {
    let n = u.norm();
    if n > r {
        *u *= r / n;
        // rounding can leave the norm a hair above r
        while u.norm() > r {
            *u *= 1.0 - f64::EPSILON;
        }
        true
    } else {
        false
    }
}

fn check_prompt(params: &AttentionParams, prompt: &PromptMatrix) -> Result<()> {
    check_dim(params.dim(), prompt.dim())?;
    if prompt.n_demos() == 0 {
        return Err(Error::Data("prompt has no demonstrations".into()));
    }
    Ok(())
}

/// Eq.-level forward pass over the full `(d+1) x (N+1)` matrix.
pub fn forward_full(params: &AttentionParams, prompt: &PromptMatrix) -> Result<DMatrix<f64>> {
    check_prompt(params, prompt)?;
    let d = prompt.dim();
    let n = prompt.n_demos() as f64;
    let e = prompt.to_matrix();
    let mut wv = DMatrix::zeros(d + 1, d + 1);
    wv[(d, d)] = 1.0;
    let mut wkq = DMatrix::zeros(d + 1, d + 1);
    wkq.view_mut((0, 0), (d, d)).copy_from(&params.u);
    let attn = e.transpose() * wkq * &e;
    Ok(&e + wv * &e * attn / n)
}

/// `s_hat^T U phi_q`, the query column's label cell after the forward pass.
pub fn forward_logit(params: &AttentionParams, prompt: &PromptMatrix) -> Result<f64> {
    check_prompt(params, prompt)?;
    let s = prompt.label_weighted_mean();
    let q = prompt.query();
    Ok(bilinear(&s, &params.u, &q))
}

/// `a^T U b`.
pub fn bilinear(a: &DVector<f64>, u: &DMatrix<f64>, b: &DVector<f64>) -> f64 {
    a.dot(&(u * b))
}

fn check_mode(prompt: &PromptMatrix, expected: LabelMode) -> Result<()> {
    if prompt.mode == expected {
        Ok(())
    } else {
        Err(Error::ModeMismatch {
            expected: expected.to_string(),
            found: prompt.mode.to_string(),
        })
    }
}

/// `(sigma(logit), z_hat)` with `z_hat = +1` only when the probability exceeds 1/2.
pub fn predict_binary(params: &AttentionParams, prompt: &PromptMatrix) -> Result<(f64, f64)> {
    check_mode(prompt, LabelMode::Binary)?;
    let p = logistic(forward_logit(params, prompt)?);
    Ok((p, if p > 0.5 { 1.0 } else { -1.0 }))
}

/// Regression output, an estimate of `2 phi_q^T theta`.
pub fn predict_regression(params: &AttentionParams, prompt: &PromptMatrix) -> Result<f64> {
    check_mode(prompt, LabelMode::ResponseTime)?;
    forward_logit(params, prompt)
}

const PARAMS_MAGIC: &str = "icra-params v1";

/// Text serialization: magic line, `d`, `radius`, `mode`, `d` rows of `U`
/// (row-major, comma separated) and a SHA-256 of everything before it.
pub fn params_to_string(params: &AttentionParams, mode: LabelMode) -> String {
    let mut s = String::new();
    let d = params.dim();
    writeln!(s, "{PARAMS_MAGIC}").unwrap();
    writeln!(s, "d,{d}").unwrap();
    writeln!(s, "radius,{}", params.radius).unwrap();
    writeln!(s, "mode,{mode}").unwrap();
    for i in 0..d {
        let row: Vec<String> = (0..d).map(|j| params.u[(i, j)].to_string()).collect();
        writeln!(s, "{}", row.join(",")).unwrap();
    }
    let digest = hex(&Sha256::digest(s.as_bytes()));
    writeln!(s, "sha256,{digest}").unwrap();
    s
}

fn hex(bytes: &[u8]) -> String {
    bytes
        .iter()
        .fold(String::with_capacity(2 * bytes.len()), |mut acc, b| {
            write!(acc, "{b:02x}").unwrap();
            acc
        })
}

pub fn params_from_str(text: &str) -> Result<(AttentionParams, LabelMode)> {
    let bad = |line: u64, msg: &str| Error::Parse {
        line,
        message: msg.to_string(),
    };
    let body_end = text
        .rfind("sha256,")
        .ok_or_else(|| bad(0, "missing checksum line"))?;
    let (body, tail) = text.split_at(body_end);
    let expected = tail.trim_end().trim_start_matches("sha256,");
    if hex(&Sha256::digest(body.as_bytes())) != expected {
        return Err(bad(0, "checksum mismatch"));
    }
    let lines: Vec<&str> = body.lines().collect();
    if lines.first() != Some(&PARAMS_MAGIC) {
        return Err(bad(1, "unrecognized params header"));
    }
    let field = |i: usize, key: &str| -> Result<&str> {
        lines
            .get(i)
            .and_then(|l| l.strip_prefix(key))
            .and_then(|l| l.strip_prefix(','))
            .ok_or_else(|| bad(i as u64 + 1, &format!("expected `{key},...`")))
    };
    let d: usize = field(1, "d")?
        .parse()
        .map_err(|_| bad(2, "bad dimension"))?;
    let radius: f64 = field(2, "radius")?
        .parse()
        .map_err(|_| bad(3, "bad radius"))?;
    let mode: LabelMode = field(3, "mode")?.parse()?;
    if lines.len() != 4 + d {
        return Err(bad(lines.len() as u64, &format!("expected {d} rows of U")));
    }
    let mut u = DMatrix::zeros(d, d);
    for i in 0..d {
        let vals: Vec<&str> = lines[4 + i].split(',').collect();
        if vals.len() != d {
            return Err(bad(5 + i as u64, &format!("expected {d} entries")));
        }
        for (j, v) in vals.iter().enumerate() {
            u[(i, j)] = v
                .parse()
                .map_err(|_| bad(5 + i as u64, "bad matrix entry"))?;
        }
    }
    Ok((AttentionParams::new(u, radius)?, mode))
}

pub fn save_params(path: &Path, params: &AttentionParams, mode: LabelMode) -> Result<()> {
    fs::write(path, params_to_string(params, mode))?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<(AttentionParams, LabelMode)> {
    params_from_str(&fs::read_to_string(path)?)
}
