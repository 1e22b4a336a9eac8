//! Versioned CSV artifacts.
//!
//! Every file starts with `#` comment lines naming its kind and schema
//! version, followed by a header row. Numbers are written in Rust's shortest
//! round-trip form, so reading a file back reproduces the values exactly.
//!
//! | file | columns |
//! |------|---------|
//! | schedule | `i,sigma` |
//! | batch | `chain,x0,x1,…` |
//! | trajectories | `chain,step,sigma,x0,…,weight` |
//! | profile | `step,w` |

use std::fmt::Write as _;

use crate::batch::SampleBatch;
use crate::error::{Error, Result};
use crate::sampler::Trajectory;
use crate::schedule::NoiseSchedule;

/// Version of every CSV schema written here.
pub const CSV_SCHEMA_VERSION: u32 = 1;

fn preamble(kind: &str, extra: &[(&str, String)]) -> String {
    let mut s = format!("# gilab {kind} v{CSV_SCHEMA_VERSION}\n");
    for (k, v) in extra {
        let _ = writeln!(s, "# {k}={v}");
    }
    s
}

fn reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes())
}

fn comment_value(text: &str, key: &str) -> Option<String> {
    text.lines()
        .take_while(|l| l.starts_with('#'))
        .find_map(|l| l.trim_start_matches('#').trim().strip_prefix(&format!("{key}=")).map(str::to_string))
}

fn check_kind(text: &str, kind: &str) -> Result<()> {
    let first = text.lines().next().unwrap_or_default();
    let want = format!("# gilab {kind} v");
    match first.strip_prefix(&want) {
        Some(v) if v.trim() == CSV_SCHEMA_VERSION.to_string() => Ok(()),
        Some(v) => Err(Error::Parse(format!("unsupported {kind} schema version {v}"))),
        None => Err(Error::Parse(format!("not a gilab {kind} file"))),
    }
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("bad {what} value {s:?}")))
}

fn parse_usize(s: &str, what: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("bad {what} value {s:?}")))
}

pub fn schedule_csv(schedule: &NoiseSchedule) -> Result<String> {
    let rule = serde_json::to_string(schedule.rule())?;
    let mut s = preamble("schedule", &[("rule", rule)]);
    s.push_str("i,sigma\n");
    for (i, v) in schedule.sigmas().iter().enumerate() {
        let _ = writeln!(s, "{i},{v}");
    }
    Ok(s)
}

/// `σ` values of a schedule file, in order.
pub fn read_schedule_csv(text: &str) -> Result<Vec<f64>> {
    check_kind(text, "schedule")?;
    let mut out = Vec::new();
    for (row, rec) in reader(text).records().enumerate() {
        let rec = rec?;
        if parse_usize(&rec[0], "i")? != row {
            return Err(Error::Parse(format!("schedule row {row} is out of order")));
        }
        out.push(parse_f64(&rec[1], "sigma")?);
    }
    Ok(out)
}

pub fn batch_csv(batch: &SampleBatch) -> String {
    let mut s = preamble("batch", &[("seed", batch.seed().to_string())]);
    s.push_str("chain");
    for a in 0..batch.dim() {
        let _ = write!(s, ",x{a}");
    }
    s.push('\n');
    for (i, row) in batch.rows().enumerate() {
        let _ = write!(s, "{i}");
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

pub fn read_batch_csv(text: &str) -> Result<SampleBatch> {
    check_kind(text, "batch")?;
    let seed = comment_value(text, "seed")
        .map(|v| v.parse::<u64>().map_err(|_| Error::Parse(format!("bad seed {v:?}"))))
        .transpose()?
        .unwrap_or(0);
    let mut rdr = reader(text);
    let headers = rdr.headers()?.clone();
    let dim = headers.len().saturating_sub(1);
    if dim == 0 || &headers[0] != "chain" {
        return Err(Error::Parse("batch header must be chain,x0,…".into()));
    }
    let mut data = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if parse_usize(&rec[0], "chain")? != row {
            return Err(Error::Parse(format!("batch row {row} is out of order")));
        }
        for a in 1..=dim {
            data.push(parse_f64(&rec[a], "coordinate")?);
        }
    }
    if data.is_empty() {
        return Err(Error::Parse("batch file has no rows".into()));
    }
    SampleBatch::new(dim, data, seed)
}

/// Trajectories of chains `first, first + 1, …`.
pub fn trajectories_csv(trajectories: &[Trajectory], first: usize) -> String {
    let dim = trajectories.first().map(|t| t.states[0].len()).unwrap_or(1);
    let mut s = preamble("trajectories", &[]);
    s.push_str("chain,step,sigma");
    for a in 0..dim {
        let _ = write!(s, ",x{a}");
    }
    s.push_str(",weight\n");
    for (c, t) in trajectories.iter().enumerate() {
        for (i, x) in t.states.iter().enumerate() {
            let _ = write!(s, "{},{i},{}", first + c, t.sigmas[i]);
            for v in x {
                let _ = write!(s, ",{v}");
            }
            // The weight of the step that starts here; the final state starts none.
            match t.weights.get(i) {
                Some(w) => {
                    let _ = writeln!(s, ",{w}");
                }
                None => s.push_str(",\n"),
            }
        }
    }
    s
}

/// One chain read back from a trajectories file.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainPath {
    pub chain: usize,
    pub sigmas: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

pub fn read_trajectories_csv(text: &str) -> Result<Vec<ChainPath>> {
    check_kind(text, "trajectories")?;
    let mut rdr = reader(text);
    let headers = rdr.headers()?.clone();
    let dim = headers.len().saturating_sub(4);
    if dim == 0 || &headers[0] != "chain" || &headers[headers.len() - 1] != "weight" {
        return Err(Error::Parse("trajectories header must be chain,step,sigma,x0,…,weight".into()));
    }
    let mut out: Vec<ChainPath> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let chain = parse_usize(&rec[0], "chain")?;
        let step = parse_usize(&rec[1], "step")?;
        if out.last().is_none_or(|p| p.chain != chain) {
            out.push(ChainPath {
                chain,
                sigmas: Vec::new(),
                states: Vec::new(),
                weights: Vec::new(),
            });
        }
        let path = out.last_mut().expect("just pushed");
        if step != path.states.len() {
            return Err(Error::Parse(format!("chain {chain}: step {step} is out of order")));
        }
        path.sigmas.push(parse_f64(&rec[2], "sigma")?);
        path.states
            .push((0..dim).map(|a| parse_f64(&rec[3 + a], "coordinate")).collect::<Result<_>>()?);
        let w = &rec[3 + dim];
        if !w.is_empty() {
            path.weights.push(parse_f64(w, "weight")?);
        }
    }
    if out.is_empty() {
        return Err(Error::Parse("trajectories file has no rows".into()));
    }
    Ok(out)
}

pub fn profile_csv(weights: &[f64]) -> String {
    let mut s = preamble("profile", &[]);
    s.push_str("step,w\n");
    for (a, w) in weights.iter().enumerate() {
        let _ = writeln!(s, "{a},{w}");
    }
    s
}

/// Per-step weights of a profile file.
pub fn read_profile_csv(text: &str) -> Result<Vec<f64>> {
    check_kind(text, "profile")?;
    let mut out = Vec::new();
    for (row, rec) in reader(text).records().enumerate() {
        let rec = rec?;
        if parse_usize(&rec[0], "step")? != row {
            return Err(Error::Parse(format!("profile row {row} is out of order")));
        }
        out.push(parse_f64(&rec[1], "w")?);
    }
    Ok(out)
}
