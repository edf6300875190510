//! Task batches as columnar CSV.
//!
//! Layout: `task_id, role, f0 .. f{d-1}, z, t, k` with one `demo` row per
//! demonstration followed by one `query` row. `t` is empty when no response time
//! was recorded. Floats are written in shortest round-trip form, so reruns are
//! byte-identical and reloads are exact.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Demonstration, FeatureDiff, Observation, TaskSample};

pub const ROLE_DEMO: &str = "demo";
pub const ROLE_QUERY: &str = "query";

fn header(d: usize) -> Vec<String> {
    let mut h = vec!["task_id".to_string(), "role".to_string()];
    h.extend((0..d).map(|i| format!("f{i}")));
    h.extend(["z", "t", "k"].map(String::from));
    h
}

fn row(id: usize, role: &str, phi: &FeatureDiff, obs: &Observation) -> Vec<String> {
    let mut r = vec![id.to_string(), role.to_string()];
    r.extend(phi.as_vector().iter().map(|x| x.to_string()));
    r.push(obs.z.to_string());
    r.push(obs.t.map(|t| t.to_string()).unwrap_or_default());
    r.push(obs.k.to_string());
    r
}

pub fn write_tasks_to<W: Write>(writer: W, tasks: &[TaskSample]) -> Result<()> {
    let d = tasks.first().map(TaskSample::dim).unwrap_or(0);
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(header(d))?;
    for (id, task) in tasks.iter().enumerate() {
        if task.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: task.dim(),
            });
        }
        for demo in &task.demos {
            w.write_record(row(id, ROLE_DEMO, &demo.phi, &demo.obs))?;
        }
        w.write_record(row(id, ROLE_QUERY, &task.query, &task.query_truth))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_tasks(path: &Path, tasks: &[TaskSample]) -> Result<()> {
    write_tasks_to(BufWriter::new(File::create(path)?), tasks)
}

fn parse_f64(field: &str, line: u64, name: &str) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| Error::Parse {
        line,
        message: format!("column {name}: cannot parse `{field}` as a number"),
    })
}

/// Reads a task batch. Loaded tasks carry no reward parameter.
pub fn read_tasks_from<R: Read>(reader: R) -> Result<Vec<TaskSample>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let head = rdr.headers()?.clone();
    let n = head.len();
    if n < 6
        || &head[0] != "task_id"
        || &head[1] != "role"
        || &head[n - 3] != "z"
        || &head[n - 2] != "t"
        || &head[n - 1] != "k"
    {
        return Err(Error::Parse {
            line: 1,
            message: "expected header task_id, role, f0.., z, t, k".into(),
        });
    }
    let d = n - 5;
    let mut tasks = Vec::new();
    let mut current: Option<String> = None;
    let mut demos = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let id = rec[0].to_string();
        let phi = FeatureDiff::new(
            (0..d)
                .map(|i| parse_f64(&rec[2 + i], line, &head[2 + i]))
                .collect::<Result<Vec<_>>>()?,
        );
        let z = parse_f64(&rec[n - 3], line, "z")?;
        let t = match rec[n - 2].trim() {
            "" => None,
            s => Some(parse_f64(s, line, "t")?),
        };
        let k = rec[n - 1].trim().parse::<u32>().map_err(|_| Error::Parse {
            line,
            message: format!("column k: cannot parse `{}`", &rec[n - 1]),
        })?;
        let obs = Observation { z, t, k };
        obs.validate().map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        match &current {
            Some(cid) if *cid != id => {
                return Err(Error::Parse {
                    line,
                    message: format!("task {cid} ended without a query row"),
                })
            }
            Some(_) => {}
            None => current = Some(id),
        }
        match &rec[1] {
            ROLE_DEMO => demos.push(Demonstration { phi, obs }),
            ROLE_QUERY => {
                current = None;
                let task = TaskSample {
                    theta: None,
                    demos: std::mem::take(&mut demos),
                    query: phi,
                    query_truth: obs,
                };
                task.validate().map_err(|e| Error::Parse {
                    line,
                    message: e.to_string(),
                })?;
                tasks.push(task);
            }
            other => {
                return Err(Error::Parse {
                    line,
                    message: format!("unknown role `{other}`"),
                })
            }
        }
    }
    if let Some(cid) = current {
        return Err(Error::Parse {
            line: 0,
            message: format!("task {cid} ended without a query row"),
        });
    }
    Ok(tasks)
}

pub fn read_tasks(path: &Path) -> Result<Vec<TaskSample>> {
    read_tasks_from(File::open(path)?)
}

/// Writes `key = value` lines, in the given order.
pub fn write_metadata(path: &Path, entries: &[(String, String)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (k, v) in entries {
        writeln!(w, "{k} = {v}")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LabelMode, PopulationSpec};
    use crate::rng::RngSeed;
    use crate::synthgen::{generate_tasks, DdmConfig, TaskShape, ThetaSource};

    fn strip_theta(tasks: &[TaskSample]) -> Vec<TaskSample> {
        tasks
            .iter()
            .cloned()
            .map(|mut t| {
                t.theta = None;
                t
            })
            .collect()
    }

    #[test]
    fn round_trip_both_modes() {
        let spec = PopulationSpec::desk_default(3).unwrap();
        for mode in [LabelMode::Binary, LabelMode::ResponseTime] {
            let tasks = generate_tasks(
                &spec,
                &TaskShape::new(5, 4, mode),
                ThetaSource::InDist,
                &DdmConfig::default(),
                20,
                RngSeed::new(1),
            )
            .unwrap();
            let mut buf = Vec::new();
            write_tasks_to(&mut buf, &tasks).unwrap();
            let text = String::from_utf8(buf.clone()).unwrap();
            assert!(text.starts_with("task_id,role,f0,f1,f2,z,t,k\n"));
            assert_eq!(text.lines().count(), 1 + 20 * 6);
            let back = read_tasks_from(buf.as_slice()).unwrap();
            assert_eq!(back, strip_theta(&tasks));
        }
    }

    #[test]
    fn missing_query_is_reported() {
        let text = "task_id,role,f0,z,t,k\n0,demo,1,1,0.5,1\n";
        assert!(matches!(
            read_tasks_from(text.as_bytes()),
            Err(Error::Parse { .. })
        ));
        let bad = "task_id,role,f0,z,t,k\n0,demo,1,1,-0.5,1\n0,query,1,1,0.5,1\n";
        match read_tasks_from(bad.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
