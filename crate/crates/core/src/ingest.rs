//! Behavioral choice data: trial loading, the quadratic rating features and
//! participant-level task construction.
//!
//! A trial offers two arms, each a pair of item ratings on the integer scale
//! `[-10, 10]`. Ratings are divided by 10, each arm's pair is sorted descending
//! (arms are unordered item sets) and mapped to `(a, b, a^2, b^2, a b)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{Demonstration, FeatureDiff, Observation, RewardParam, TaskSample};
use crate::rng::{tags, RngSeed};
use crate::synthgen::sample_first_passage;

pub const FEATURE_DIM: usize = 5;
pub const RATING_MIN: i32 = -10;
pub const RATING_MAX: i32 = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub participant: String,
    pub arm0: (i32, i32),
    pub arm1: (i32, i32),
    /// 1 when arm 1 was chosen.
    pub choice: u8,
    /// Seconds.
    pub rt: f64,
}

impl TrialRecord {
    pub fn validate(&self) -> Result<()> {
        for r in [self.arm0.0, self.arm0.1, self.arm1.0, self.arm1.1] {
            if !(RATING_MIN..=RATING_MAX).contains(&r) {
                return Err(Error::Data(format!("rating out of range [-10,10]: {r}")));
            }
        }
        if self.choice > 1 {
            return Err(Error::Data(format!(
                "choice must be 0 or 1, got {}",
                self.choice
            )));
        }
        if !(self.rt > 0.0 && self.rt.is_finite()) {
            return Err(Error::Data(format!(
                "response time must be positive, got {}",
                self.rt
            )));
        }
        Ok(())
    }
}

/// Column names of the trial CSV; other columns are ignored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialSchema {
    pub participant: String,
    pub r0a: String,
    pub r0b: String,
    pub r1a: String,
    pub r1b: String,
    pub choice: String,
    pub rt: String,
}

impl Default for TrialSchema {
    fn default() -> Self {
        Self {
            participant: "participant".into(),
            r0a: "r0a".into(),
            r0b: "r0b".into(),
            r1a: "r1a".into(),
            r1b: "r1b".into(),
            choice: "choice".into(),
            rt: "rt".into(),
        }
    }
}

impl TrialSchema {
    fn names(&self) -> [&str; 7] {
        [
            &self.participant,
            &self.r0a,
            &self.r0b,
            &self.r1a,
            &self.r1b,
            &self.choice,
            &self.rt,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowError {
    pub line: u64,
    pub message: String,
}

/// Records that passed validation and the rows that did not.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrialLoad {
    pub records: Vec<TrialRecord>,
    pub errors: Vec<RowError>,
}

fn parse_rating(s: &str) -> std::result::Result<i32, String> {
    let v: i32 = s
        .trim()
        .parse()
        .map_err(|_| format!("rating `{s}` is not an integer"))?;
    if !(RATING_MIN..=RATING_MAX).contains(&v) {
        return Err(format!("rating out of range [-10,10]: {v}"));
    }
    Ok(v)
}

fn parse_row(fields: [&str; 7]) -> std::result::Result<TrialRecord, String> {
    let participant = fields[0].trim();
    if participant.is_empty() {
        return Err("empty participant id".into());
    }
    let choice: u8 = match fields[5].trim() {
        "0" => 0,
        "1" => 1,
        other => return Err(format!("choice must be 0 or 1, got `{other}`")),
    };
    let rt: f64 = fields[6]
        .trim()
        .parse()
        .map_err(|_| format!("response time `{}` is not a number", fields[6]))?;
    if !(rt > 0.0 && rt.is_finite()) {
        return Err(format!("response time must be positive, got {rt}"));
    }
    Ok(TrialRecord {
        participant: participant.to_string(),
        arm0: (parse_rating(fields[1])?, parse_rating(fields[2])?),
        arm1: (parse_rating(fields[3])?, parse_rating(fields[4])?),
        choice,
        rt,
    })
}

/// Parses trials. In strict mode the first bad row is an error; otherwise bad
/// rows are collected with their line numbers.
pub fn load_trials_from<R: Read>(
    reader: R,
    schema: &TrialSchema,
    strict: bool,
) -> Result<TrialLoad> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut idx = [0usize; 7];
    for (slot, name) in idx.iter_mut().zip(schema.names()) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Data(format!("missing column `{name}`")))?;
    }
    let mut load = TrialLoad::default();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let fields = idx.map(|i| rec.get(i).unwrap_or(""));
        match parse_row(fields) {
            Ok(r) => load.records.push(r),
            Err(message) if strict => return Err(Error::Parse { line, message }),
            Err(message) => load.errors.push(RowError { line, message }),
        }
    }
    Ok(load)
}

pub fn load_trials(path: &Path, schema: &TrialSchema, strict: bool) -> Result<TrialLoad> {
    load_trials_from(File::open(path)?, schema, strict)
}

pub fn write_trials_to<W: Write>(writer: W, records: &[TrialRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(TrialSchema::default().names())?;
    for r in records {
        w.write_record([
            r.participant.clone(),
            r.arm0.0.to_string(),
            r.arm0.1.to_string(),
            r.arm1.0.to_string(),
            r.arm1.1.to_string(),
            r.choice.to_string(),
            r.rt.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trials(path: &Path, records: &[TrialRecord]) -> Result<()> {
    write_trials_to(BufWriter::new(File::create(path)?), records)
}

/// `(a, b, a^2, b^2, a b)` of one arm after rescaling and sorting.
pub fn arm_features(arm: (i32, i32)) -> [f64; FEATURE_DIM] {
    let (x, y) = (arm.0 as f64 / 10.0, arm.1 as f64 / 10.0);
    let (a, b) = if x >= y { (x, y) } else { (y, x) };
    [a, b, a * a, b * b, a * b]
}

/// Feature difference `psi(arm1) - psi(arm0)`, the choice in `±1` and the time.
pub fn featurize(record: &TrialRecord) -> Result<(FeatureDiff, f64, f64)> {
    record.validate()?;
    let (p1, p0) = (arm_features(record.arm1), arm_features(record.arm0));
    let diff = FeatureDiff::new((0..FEATURE_DIM).map(|i| p1[i] - p0[i]).collect());
    let z = if record.choice == 1 { 1.0 } else { -1.0 };
    Ok((diff, z, record.rt))
}

/// Participants held out as a new type, and the minimum trial count per participant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub heldout: BTreeSet<String>,
    pub min_trials: usize,
}

impl SplitSpec {
    /// Holds out the last `n` participants in sorted id order.
    pub fn last_participants(records: &[TrialRecord], n: usize, min_trials: usize) -> Self {
        let ids: BTreeSet<&str> = records.iter().map(|r| r.participant.as_str()).collect();
        let skip = ids.len().saturating_sub(n);
        Self {
            heldout: ids.into_iter().skip(skip).map(String::from).collect(),
            min_trials,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heldout.is_empty() {
            return Err(Error::Config("held-out participant set is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RealTasks {
    pub train: Vec<TaskSample>,
    pub heldout: Vec<TaskSample>,
    /// Participants dropped for having too few trials, with their counts.
    pub skipped: Vec<(String, usize)>,
}

/// Splits each participant's shuffled trials into disjoint groups of `m + 1`
/// (`m` demonstrations, then the query). Tasks carry `k = 1` and no reward parameter.
pub fn build_real_tasks(
    records: &[TrialRecord],
    split: &SplitSpec,
    m: usize,
    seed: u64,
) -> Result<RealTasks> {
    split.validate()?;
    if m == 0 {
        return Err(Error::Config(
            "tasks need at least one demonstration".into(),
        ));
    }
    let mut by_participant: BTreeMap<&str, Vec<&TrialRecord>> = BTreeMap::new();
    for r in records {
        by_participant
            .entry(r.participant.as_str())
            .or_default()
            .push(r);
    }
    let training: Vec<&str> = by_participant
        .keys()
        .filter(|p| !split.heldout.contains(**p))
        .copied()
        .collect();
    if training.is_empty() {
        return Err(Error::Config(
            "no training participants remain after the split".into(),
        ));
    }
    let stream = RngSeed::with_stream(seed, tags::INGEST);
    let need = (m + 1).max(split.min_trials);
    let mut out = RealTasks::default();
    for (i, (pid, trials)) in by_participant.iter().enumerate() {
        if trials.len() < need {
            out.skipped.push((pid.to_string(), trials.len()));
            continue;
        }
        let mut order: Vec<usize> = (0..trials.len()).collect();
        order.shuffle(&mut stream.substream(i as u64).rng());
        let target = if split.heldout.contains(*pid) {
            &mut out.heldout
        } else {
            &mut out.train
        };
        for chunk in order.chunks_exact(m + 1) {
            let mut rows = chunk.iter().map(|&j| featurize(trials[j]));
            let mut demos = Vec::with_capacity(m);
            for _ in 0..m {
                let (phi, z, t) = rows.next().expect("chunk has m + 1 rows")?;
                demos.push(Demonstration {
                    phi,
                    obs: Observation {
                        z,
                        t: Some(t),
                        k: 1,
                    },
                });
            }
            let (query, z, t) = rows.next().expect("chunk has m + 1 rows")?;
            target.push(TaskSample {
                theta: None,
                demos,
                query,
                query_truth: Observation {
                    z,
                    t: Some(t),
                    k: 1,
                },
            });
        }
    }
    Ok(out)
}

/// Shape of a synthetic trial file mimicking the behavioral schema.
#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub participants: usize,
    pub trials_per_participant: usize,
    /// Standard deviation of each participant's reward coefficients.
    pub theta_scale: f64,
    /// Added to every response time.
    pub non_decision_time: f64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            participants: 12,
            trials_per_participant: 120,
            theta_scale: 2.0,
            non_decision_time: 0.0,
        }
    }
}

/// Trials from simulated participants: each has a random reward parameter on the
/// quadratic features and responds by drift-diffusion. Returns the parameters too.
pub fn synthetic_trials(
    spec: &FixtureSpec,
    seed: u64,
) -> Result<(Vec<TrialRecord>, Vec<RewardParam>)> {
    let normal = Normal::new(0.0, spec.theta_scale)
        .map_err(|e| Error::Config(format!("theta scale: {e}")))?;
    let stream = RngSeed::with_stream(seed, tags::INGEST).substream(u64::MAX);
    let mut records = Vec::with_capacity(spec.participants * spec.trials_per_participant);
    let mut thetas = Vec::with_capacity(spec.participants);
    for p in 0..spec.participants {
        let mut rng = stream.substream(p as u64).rng();
        let theta = RewardParam::new((0..FEATURE_DIM).map(|_| normal.sample(&mut rng)).collect())?;
        for _ in 0..spec.trials_per_participant {
            let mut rating = || rng.random_range(RATING_MIN..=RATING_MAX);
            let (arm0, arm1) = ((rating(), rating()), (rating(), rating()));
            let mut record = TrialRecord {
                participant: format!("p{p:03}"),
                arm0,
                arm1,
                choice: 0,
                rt: 1.0,
            };
            let (phi, _, _) = featurize(&record)?;
            let (z, t) = sample_first_passage(phi.logit(&theta)?, 1, &mut rng)?;
            record.choice = u8::from(z > 0.0);
            record.rt = t + spec.non_decision_time;
            records.push(record);
        }
        thetas.push(theta);
    }
    Ok((records, thetas))
}
