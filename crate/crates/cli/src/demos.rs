//! Demonstration files.
//!
//! CSV with `# key=value` provenance lines, then the header
//! `episode,t,s_0..s_{ds-1},a_0..a_{da-1}` and one row per step. Floats are
//! written with 17 significant digits so they read back bit-exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct DemoRecord {
    pub episode: usize,
    pub t: usize,
    pub s: Vec<f64>,
    pub a: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoSet {
    /// Provenance: env, expert, seed, count, expert_return, config_hash, ...
    pub header: BTreeMap<String, String>,
    pub records: Vec<DemoRecord>,
}

fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

impl DemoSet {
    pub fn state_dim(&self) -> usize {
        self.records.first().map_or(0, |r| r.s.len())
    }

    pub fn action_dim(&self) -> usize {
        self.records.first().map_or(0, |r| r.a.len())
    }

    /// Concatenated `(s, a)` rows.
    pub fn pairs(&self) -> Vec<Vec<f64>> {
        self.records
            .iter()
            .map(|r| r.s.iter().chain(&r.a).copied().collect())
            .collect()
    }

    /// Shared dimensions and contiguous timesteps within each episode.
    pub fn validate(&self) -> Result<(), CliError> {
        let (ds, da) = (self.state_dim(), self.action_dim());
        let mut expected: BTreeMap<usize, usize> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            if r.s.len() != ds || r.a.len() != da {
                return Err(CliError::Input(format!("record {i} has mismatched dimensions")));
            }
            let next = expected.entry(r.episode).or_insert(0);
            if r.t != *next {
                return Err(CliError::Input(format!(
                    "episode {} jumps to t = {} at record {i}, expected {}",
                    r.episode, r.t, next
                )));
            }
            *next += 1;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.header {
            writeln!(out, "# {k}={v}").expect("string write");
        }
        let mut cols = vec!["episode".to_string(), "t".to_string()];
        cols.extend((0..self.state_dim()).map(|i| format!("s_{i}")));
        cols.extend((0..self.action_dim()).map(|i| format!("a_{i}")));
        out.push_str(&cols.join(","));
        out.push('\n');
        for r in &self.records {
            let mut row = vec![r.episode.to_string(), r.t.to_string()];
            row.extend(r.s.iter().chain(&r.a).map(|x| fmt_f64(*x)));
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, CliError> {
        let bad = |m: String| CliError::Input(format!("demo file: {m}"));
        let mut header = BTreeMap::new();
        let mut lines = text.lines().enumerate().peekable();
        while let Some((_, line)) = lines.peek() {
            let Some(rest) = line.strip_prefix('#') else { break };
            let (k, v) = rest
                .trim()
                .split_once('=')
                .ok_or_else(|| bad(format!("malformed provenance line {line:?}")))?;
            header.insert(k.to_string(), v.to_string());
            lines.next();
        }
        let (_, cols) = lines.next().ok_or_else(|| bad("missing column header".into()))?;
        let cols: Vec<&str> = cols.split(',').collect();
        if cols.len() < 2 || cols[0] != "episode" || cols[1] != "t" {
            return Err(bad(format!("unexpected column header {cols:?}")));
        }
        let ds = cols.iter().filter(|c| c.starts_with("s_")).count();
        let da = cols.iter().filter(|c| c.starts_with("a_")).count();
        if ds + da + 2 != cols.len() {
            return Err(bad("unknown columns".into()));
        }
        let mut records = Vec::new();
        for (ln, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols.len() {
                return Err(bad(format!("line {} has {} fields", ln + 1, fields.len())));
            }
            let int = |f: &str| f.parse::<usize>().map_err(|e| bad(format!("line {}: {e}", ln + 1)));
            let float = |f: &str| f.parse::<f64>().map_err(|e| bad(format!("line {}: {e}", ln + 1)));
            let values = fields[2..].iter().map(|f| float(f)).collect::<Result<Vec<_>, _>>()?;
            records.push(DemoRecord {
                episode: int(fields[0])?,
                t: int(fields[1])?,
                s: values[..ds].to_vec(),
                a: values[ds..].to_vec(),
            });
        }
        let set = Self { header, records };
        set.validate()?;
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_csv()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_csv(&text)
    }
}
