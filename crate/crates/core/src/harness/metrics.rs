//! Metrics rows, their append-only CSV files and rank statistics.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "step,eval_return_mean,eval_return_std,learned_reward_spearman,encoder_or_disc_loss,critic_loss,actor_loss,al_gap";
pub const COMPLETED: &str = "# completed";
pub const FAILED_PREFIX: &str = "# failed: ";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
    pub learned_reward_spearman: Option<f64>,
    pub encoder_or_disc_loss: Option<f64>,
    pub critic_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub al_gap: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn parse_opt(field: &str, line: usize) -> Result<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse()
        .map(Some)
        .map_err(|e| Error::Invalid(format!("metrics line {line}: bad number {field:?}: {e}")))
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.eval_return_mean,
            self.eval_return_std,
            opt(self.learned_reward_spearman),
            opt(self.encoder_or_disc_loss),
            opt(self.critic_loss),
            opt(self.actor_loss),
            opt(self.al_gap)
        )
    }

    fn parse(line: &str, line_no: usize) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(Error::Invalid(format!(
                "metrics line {line_no}: expected 8 fields, found {}",
                f.len()
            )));
        }
        let req = |i: usize| {
            parse_opt(f[i], line_no)?
                .ok_or_else(|| Error::Invalid(format!("metrics line {line_no}: field {i} is empty")))
        };
        Ok(Self {
            step: f[0]
                .parse()
                .map_err(|e| Error::Invalid(format!("metrics line {line_no}: bad step: {e}")))?,
            eval_return_mean: req(1)?,
            eval_return_std: req(2)?,
            learned_reward_spearman: parse_opt(f[3], line_no)?,
            encoder_or_disc_loss: parse_opt(f[4], line_no)?,
            critic_loss: parse_opt(f[5], line_no)?,
            actor_loss: parse_opt(f[6], line_no)?,
            al_gap: parse_opt(f[7], line_no)?,
        })
    }
}

/// Append-only metrics file: `# key=value` metadata, the header, one row
/// per evaluation, then a completion or failure sentinel.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
    last_step: Option<u64>,
}

impl MetricsWriter {
    pub fn create(path: impl AsRef<Path>, meta: &[(&str, String)]) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = Self {
            path,
            out: BufWriter::new(file),
            last_step: None,
        };
        for (k, v) in meta {
            w.line(&format!("# {k}={v}"))?;
        }
        w.line(METRICS_HEADER)?;
        Ok(w)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        let path = &self.path;
        writeln!(self.out, "{s}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn push(&mut self, row: &MetricsRow) -> Result<()> {
        if self.last_step.is_some_and(|s| row.step <= s) {
            return Err(Error::Invalid(format!(
                "metrics steps must increase: {} after {:?}",
                row.step, self.last_step
            )));
        }
        self.last_step = Some(row.step);
        self.line(&row.to_csv())
    }

    pub fn complete(mut self) -> Result<()> {
        self.line(COMPLETED)
    }

    pub fn fail(mut self, msg: &str) -> Result<()> {
        let one_line = msg.replace('\n', " ");
        self.line(&format!("{FAILED_PREFIX}{one_line}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsFile {
    pub meta: BTreeMap<String, String>,
    pub rows: Vec<MetricsRow>,
    pub completed: bool,
    pub failure: Option<String>,
}

pub fn parse_metrics(text: &str) -> Result<MetricsFile> {
    let mut meta = BTreeMap::new();
    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut header = false;
    let mut completed = false;
    let mut failure = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end();
        if line.is_empty() {
            continue;
        }
        if line == COMPLETED {
            completed = true;
        } else if let Some(msg) = line.strip_prefix(FAILED_PREFIX) {
            failure = Some(msg.to_string());
        } else if let Some(c) = line.strip_prefix("# ") {
            if let Some((k, v)) = c.split_once('=') {
                meta.insert(k.to_string(), v.to_string());
            }
        } else if line.starts_with('#') {
            continue;
        } else if !header {
            if line != METRICS_HEADER {
                return Err(Error::Invalid(format!("unexpected metrics header {line:?}")));
            }
            header = true;
        } else {
            let row = MetricsRow::parse(line, i + 1)?;
            if rows.last().is_some_and(|r| r.step >= row.step) {
                return Err(Error::Invalid(format!("metrics line {}: steps must increase", i + 1)));
            }
            rows.push(row);
        }
    }
    if !header {
        return Err(Error::Invalid("metrics file has no header row".into()));
    }
    Ok(MetricsFile {
        meta,
        rows,
        completed,
        failure,
    })
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<MetricsFile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics(&text)
}

/// Ranks starting at 1 with tied values sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation with average-rank ties; `None` when either side is
/// constant or the lengths differ.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 || a.iter().chain(b).any(|v| !v.is_finite()) {
        return None;
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut c, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        c += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    (va > 0.0 && vb > 0.0).then(|| (c / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Mean and sample standard deviation; the deviation of one value is 0.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() == 1 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
    }

    #[test]
    fn spearman_cases() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&a, &[10.0, 20.0, 30.0, 400.0]), Some(1.0));
        assert_eq!(spearman(&a, &[4.0, 3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&a, &[1.0, 1.0, 1.0, 1.0]), None);
        let s = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((s - 0.9486832980505138).abs() < 1e-12);
    }

    #[test]
    fn mean_std_conventions() {
        assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut w = MetricsWriter::create(&path, &[("label", "pcil".into())]).unwrap();
        let row = MetricsRow {
            step: 5,
            eval_return_mean: 1.5,
            eval_return_std: 0.25,
            learned_reward_spearman: Some(0.7),
            encoder_or_disc_loss: None,
            critic_loss: Some(0.1),
            actor_loss: Some(-2.0),
            al_gap: None,
        };
        w.push(&row).unwrap();
        assert!(w.push(&row).is_err());
        w.complete().unwrap();
        let f = read_metrics(&path).unwrap();
        assert_eq!(f.rows, vec![row]);
        assert!(f.completed);
        assert_eq!(f.meta["label"], "pcil");
        assert!(parse_metrics("1,2,3\n").is_err());
    }
}
