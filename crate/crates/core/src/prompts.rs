//! Prompt matrices.
//!
//! The raw prompt stacks `phi0`, `phi1`, optionally a response-time row, and the
//! choice row; its query column has no label. The fixed linear map
//! `[-I, I, 0; 0, 0, 1]` turns it into the transformed prompt whose columns are
//! `(phi_diff, label)`. Since only differences survive the map, raw prompts are
//! built with `phi0 = 0` and `phi1 = phi_diff`.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::model::{FeatureDiff, LabelMode, Observation, TaskSample};
use crate::synthgen::io::{read_tasks_from, write_tasks_to};

/// Label carried by one demonstration column: `z` or `z / t`.
pub fn label(obs: &Observation, mode: LabelMode) -> Result<f64> {
    match mode {
        LabelMode::Binary => Ok(obs.z),
        LabelMode::ResponseTime => {
            let r = obs.ratio()?;
            if r.is_finite() {
                Ok(r)
            } else {
                Err(Error::Data(format!(
                    "label z/t is not finite ({} / {:?})",
                    obs.z, obs.t
                )))
            }
        }
    }
}

/// `s_hat = (1/N) sum_l label_l phi_l`.
pub fn label_weighted_mean(task: &TaskSample, mode: LabelMode) -> Result<DVector<f64>> {
    let d = task.dim();
    let mut s = DVector::zeros(d);
    for demo in &task.demos {
        check_dim(d, demo.phi.dim())?;
        s.axpy(label(&demo.obs, mode)?, demo.phi.as_vector(), 1.0);
    }
    Ok(s / task.n_demos() as f64)
}

/// Untransformed prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPrompt {
    pub mode: LabelMode,
    /// `d x (N+1)`.
    pub phi0: DMatrix<f64>,
    /// `d x (N+1)`.
    pub phi1: DMatrix<f64>,
    /// Demonstration response times, response-time mode only.
    pub times: Option<DVector<f64>>,
    /// Demonstration choices; the query has none.
    pub choices: DVector<f64>,
}

impl RawPrompt {
    pub fn dim(&self) -> usize {
        self.phi0.nrows()
    }

    pub fn n_demos(&self) -> usize {
        self.choices.len()
    }

    /// `2d + 1` in binary mode, `2d + 2` with the time row.
    pub fn n_rows(&self) -> usize {
        2 * self.dim() + 1 + usize::from(self.times.is_some())
    }

    /// Entry of the stacked matrix; `None` for the masked query label cells.
    pub fn cell(&self, row: usize, col: usize) -> Option<f64> {
        let d = self.dim();
        let n = self.n_demos();
        if col > n || row >= self.n_rows() {
            return None;
        }
        if row < d {
            return Some(self.phi0[(row, col)]);
        }
        if row < 2 * d {
            return Some(self.phi1[(row - d, col)]);
        }
        if col == n {
            return None;
        }
        match (&self.times, row - 2 * d) {
            (Some(t), 0) => Some(t[col]),
            _ => Some(self.choices[col]),
        }
    }
}

/// Transformed prompt: feature columns plus demonstration labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptMatrix {
    pub mode: LabelMode,
    /// `d x (N+1)`; the last column is the query.
    pub features: DMatrix<f64>,
    /// Length `N`; the query label is structurally absent.
    pub labels: DVector<f64>,
}

impl PromptMatrix {
    pub fn new(mode: LabelMode, features: DMatrix<f64>, labels: DVector<f64>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Data(
                "prompt needs at least one demonstration".into(),
            ));
        }
        check_dim(labels.len() + 1, features.ncols())?;
        if labels.iter().chain(features.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Data("prompt contains non-finite entries".into()));
        }
        Ok(Self {
            mode,
            features,
            labels,
        })
    }

    pub fn dim(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_demos(&self) -> usize {
        self.labels.len()
    }

    pub fn query(&self) -> DVector<f64> {
        self.features.column(self.n_demos()).into_owned()
    }

    /// `(1/N) sum_l label_l phi_l`.
    pub fn label_weighted_mean(&self) -> DVector<f64> {
        let n = self.n_demos();
        self.features.columns(0, n) * &self.labels / n as f64
    }

    /// Full `(d+1) x (N+1)` matrix with a zero in the query label cell.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        let n = self.n_demos();
        let mut m = DMatrix::zeros(d + 1, n + 1);
        m.view_mut((0, 0), (d, n + 1)).copy_from(&self.features);
        for l in 0..n {
            m[(d, l)] = self.labels[l];
        }
        m
    }
}

pub fn build_raw_prompt(task: &TaskSample, mode: LabelMode) -> Result<RawPrompt> {
    let d = task.dim();
    let n = task.n_demos();
    let mut phi1 = DMatrix::zeros(d, n + 1);
    for (l, demo) in task.demos.iter().enumerate() {
        check_dim(d, demo.phi.dim())?;
        phi1.set_column(l, demo.phi.as_vector());
    }
    phi1.set_column(n, task.query.as_vector());
    let choices = DVector::from_iterator(n, task.demos.iter().map(|x| x.obs.z));
    let times = match mode {
        LabelMode::Binary => None,
        LabelMode::ResponseTime => Some(DVector::from_iterator(
            n,
            task.demos
                .iter()
                .map(|x| {
                    x.obs
                        .t
                        .ok_or_else(|| Error::Data("response time missing".into()))
                })
                .collect::<Result<Vec<_>>>()?,
        )),
    };
    Ok(RawPrompt {
        mode,
        phi0: DMatrix::zeros(d, n + 1),
        phi1,
        times,
        choices,
    })
}

pub fn transform(raw: &RawPrompt) -> Result<PromptMatrix> {
    check_dim(raw.phi0.ncols(), raw.phi1.ncols())?;
    check_dim(raw.phi0.nrows(), raw.phi1.nrows())?;
    check_dim(raw.n_demos() + 1, raw.phi0.ncols())?;
    let features = &raw.phi1 - &raw.phi0;
    let labels = match (raw.mode, &raw.times) {
        (LabelMode::Binary, _) => raw.choices.clone(),
        (LabelMode::ResponseTime, Some(t)) => {
            if let Some(bad) = t.iter().find(|&&x| !(x > 0.0)) {
                return Err(Error::Data(format!(
                    "response time must be positive, got {bad}"
                )));
            }
            raw.choices.component_div(t)
        }
        (LabelMode::ResponseTime, None) => {
            return Err(Error::Data(
                "response-time prompt without a time row".into(),
            ))
        }
    };
    PromptMatrix::new(raw.mode, features, labels)
}

pub fn build_prompt(task: &TaskSample, mode: LabelMode) -> Result<PromptMatrix> {
    let d = task.dim();
    let n = task.n_demos();
    let mut features = DMatrix::zeros(d, n + 1);
    let mut labels = DVector::zeros(n);
    for (l, demo) in task.demos.iter().enumerate() {
        check_dim(d, demo.phi.dim())?;
        features.set_column(l, demo.phi.as_vector());
        labels[l] = label(&demo.obs, mode)?;
    }
    features.set_column(n, task.query.as_vector());
    PromptMatrix::new(mode, features, labels)
}

/// Writes prompts through the task CSV schema. Binary labels become `z` with
/// `k = 1` when they are `±1` (otherwise `k = 2`); ratio labels `r` become
/// `z = sign(r)`, `t = 1/|r|`. The query row carries a zero-information label.
pub fn write_prompts_to<W: Write>(writer: W, prompts: &[PromptMatrix]) -> Result<()> {
    let tasks = prompts
        .iter()
        .map(prompt_to_task)
        .collect::<Result<Vec<_>>>()?;
    write_tasks_to(writer, &tasks)
}

pub fn read_prompts_from<R: Read>(reader: R, mode: LabelMode) -> Result<Vec<PromptMatrix>> {
    read_tasks_from(reader)?
        .iter()
        .map(|t| build_prompt(t, mode))
        .collect()
}

fn label_to_obs(x: f64, mode: LabelMode) -> Observation {
    match mode {
        LabelMode::Binary => Observation {
            z: x,
            t: None,
            k: if x.abs() == 1.0 { 1 } else { 2 },
        },
        LabelMode::ResponseTime if x == 0.0 => Observation {
            z: 0.0,
            t: Some(1.0),
            k: 2,
        },
        LabelMode::ResponseTime => Observation {
            z: x.signum(),
            t: Some(1.0 / x.abs()),
            k: 1,
        },
    }
}

fn prompt_to_task(p: &PromptMatrix) -> Result<TaskSample> {
    let n = p.n_demos();
    let demos = (0..n)
        .map(|l| crate::model::Demonstration {
            phi: FeatureDiff::from_vector(p.features.column(l).into_owned()),
            obs: label_to_obs(p.labels[l], p.mode),
        })
        .collect();
    let query_truth = match p.mode {
        LabelMode::Binary => Observation {
            z: 0.0,
            t: None,
            k: 2,
        },
        LabelMode::ResponseTime => Observation {
            z: 0.0,
            t: Some(1.0),
            k: 2,
        },
    };
    Ok(TaskSample {
        theta: None,
        demos,
        query: FeatureDiff::from_vector(p.query()),
        query_truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Demonstration, PopulationSpec};
    use crate::rng::RngSeed;
    use crate::synthgen::{generate_tasks, DdmConfig, TaskShape, ThetaSource};
    use proptest::prelude::*;

    fn demo(phi: Vec<f64>, z: f64, t: Option<f64>) -> Demonstration {
        Demonstration {
            phi: FeatureDiff::new(phi),
            obs: Observation { z, t, k: 1 },
        }
    }

    fn one_demo_task() -> TaskSample {
        TaskSample {
            theta: None,
            demos: vec![demo(vec![0.7], 1.0, Some(0.25))],
            query: FeatureDiff::new(vec![-0.3]),
            query_truth: Observation {
                z: -1.0,
                t: Some(0.4),
                k: 1,
            },
        }
    }

    #[test]
    fn raw_layout() {
        let raw = build_raw_prompt(&one_demo_task(), LabelMode::Binary).unwrap();
        assert_eq!(raw.n_rows(), 3);
        assert_eq!(raw.cell(0, 0), Some(0.0));
        assert_eq!(raw.cell(0, 1), Some(0.0));
        assert_eq!(raw.cell(1, 0), Some(0.7));
        assert_eq!(raw.cell(1, 1), Some(-0.3));
        assert_eq!(raw.cell(2, 0), Some(1.0));
        assert_eq!(raw.cell(2, 1), None);

        let rt = build_raw_prompt(&one_demo_task(), LabelMode::ResponseTime).unwrap();
        assert_eq!(rt.n_rows(), 4);
        assert_eq!(rt.cell(2, 0), Some(0.25));
        assert_eq!(rt.cell(3, 0), Some(1.0));
        assert_eq!(rt.cell(2, 1), None);
        assert_eq!(rt.cell(3, 1), None);
    }

    #[test]
    fn ratio_labels() {
        let p = build_prompt(&one_demo_task(), LabelMode::ResponseTime).unwrap();
        assert_eq!(p.labels[0], 4.0);
        let mut t = one_demo_task();
        t.demos[0].obs = Observation {
            z: 0.8,
            t: Some(0.2),
            k: 5,
        };
        let raw = build_raw_prompt(&t, LabelMode::ResponseTime).unwrap();
        assert!((transform(&raw).unwrap().labels[0] - 4.0).abs() < 1e-15);
    }

    #[test]
    fn nonpositive_time_is_a_data_error() {
        let mut raw = build_raw_prompt(&one_demo_task(), LabelMode::ResponseTime).unwrap();
        raw.times = Some(DVector::from_vec(vec![0.0]));
        assert!(matches!(transform(&raw), Err(Error::Data(_))));
    }

    #[test]
    fn equal_arms_give_zero_features() {
        let mut raw = build_raw_prompt(&one_demo_task(), LabelMode::Binary).unwrap();
        raw.phi0 = raw.phi1.clone();
        let p = transform(&raw).unwrap();
        assert!(p.features.iter().all(|&x| x == 0.0));
        assert_eq!(p.labels[0], 1.0);
    }

    #[test]
    fn binary_labels_are_choices() {
        let task = TaskSample {
            theta: None,
            demos: vec![
                demo(vec![1.0, 0.0], 1.0, None),
                demo(vec![0.0, 1.0], -1.0, None),
            ],
            query: FeatureDiff::new(vec![1.0, 1.0]),
            query_truth: Observation {
                z: 1.0,
                t: None,
                k: 1,
            },
        };
        let p = build_prompt(&task, LabelMode::Binary).unwrap();
        assert_eq!(p.labels.as_slice(), &[1.0, -1.0]);
        assert_eq!(p.features.shape(), (2, 3));
    }

    fn batch(mode: LabelMode, n: usize) -> Vec<TaskSample> {
        generate_tasks(
            &PopulationSpec::desk_default(3).unwrap(),
            &TaskShape::new(6, 3, mode),
            ThetaSource::InDist,
            &DdmConfig::default(),
            n,
            RngSeed::new(21),
        )
        .unwrap()
    }

    #[test]
    fn two_construction_paths_agree() {
        for mode in [LabelMode::Binary, LabelMode::ResponseTime] {
            for task in batch(mode, 50) {
                let a = transform(&build_raw_prompt(&task, mode).unwrap()).unwrap();
                let b = build_prompt(&task, mode).unwrap();
                assert_eq!(a, b);
                assert_eq!(a.features.shape(), (3, 7));
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        for mode in [LabelMode::Binary, LabelMode::ResponseTime] {
            let prompts: Vec<_> = batch(mode, 10)
                .iter()
                .map(|t| build_prompt(t, mode).unwrap())
                .collect();
            let mut buf = Vec::new();
            write_prompts_to(&mut buf, &prompts).unwrap();
            let back = read_prompts_from(buf.as_slice(), mode).unwrap();
            for (a, b) in prompts.iter().zip(&back) {
                assert_eq!(a.features, b.features);
                for (x, y) in a.labels.iter().zip(b.labels.iter()) {
                    assert!((x - y).abs() <= 4.0 * f64::EPSILON * x.abs());
                }
            }
        }
    }

    fn raw_strategy() -> impl Strategy<Value = (RawPrompt, RawPrompt, f64, f64)> {
        let n = 3;
        let d = 2;
        let m = || proptest::collection::vec(-5.0f64..5.0, d * (n + 1));
        let c = || proptest::collection::vec(-1.0f64..1.0, n);
        (m(), m(), m(), m(), c(), c(), -3.0f64..3.0, -3.0f64..3.0).prop_map(
            move |(a0, a1, b0, b1, ca, cb, al, be)| {
                let mk = |p0: Vec<f64>, p1: Vec<f64>, ch: Vec<f64>| RawPrompt {
                    mode: LabelMode::Binary,
                    phi0: DMatrix::from_vec(d, n + 1, p0),
                    phi1: DMatrix::from_vec(d, n + 1, p1),
                    times: None,
                    choices: DVector::from_vec(ch),
                };
                (mk(a0, a1, ca), mk(b0, b1, cb), al, be)
            },
        )
    }

    proptest! {
        #[test]
        fn transform_is_linear((a, b, al, be) in raw_strategy()) {
            let combo = RawPrompt {
                mode: LabelMode::Binary,
                phi0: &a.phi0 * al + &b.phi0 * be,
                phi1: &a.phi1 * al + &b.phi1 * be,
                times: None,
                choices: &a.choices * al + &b.choices * be,
            };
            let lhs = transform(&combo).unwrap();
            let ta = transform(&a).unwrap();
            let tb = transform(&b).unwrap();
            prop_assert!((lhs.features - (ta.features * al + tb.features * be)).amax() < 1e-12);
            prop_assert!((lhs.labels - (ta.labels * al + tb.labels * be)).amax() < 1e-12);
        }
    }
}
