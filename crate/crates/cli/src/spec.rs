//! Resolved experiment specifications and the list syntax of the flags.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::CliError;

/// Subcommand tag recorded in every output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandTag {
    Solve,
    Parisi,
    Scan,
    Verify,
    Opnorm,
    Stability,
}

/// Property suites driven by `verify`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    /// Hölder stability and deficient-l2 batteries.
    Appendix,
    /// PDE residual, quadrature stability and the SDE cross-check.
    Pde,
    /// Growth envelope, evenness and convexity of the boundary function.
    Boundary,
    /// Operator-norm estimates against the Chevet bracket.
    Chevet,
    All,
}

/// Every parameter a run depends on, after defaults are applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub command: CommandTag,
    pub p: Vec<f64>,
    pub n: Vec<usize>,
    pub t: Vec<f64>,
    pub seeds: Vec<u64>,
    pub restarts: usize,
    /// Grid overrides by name (`quad_order`, `grid_step`).
    pub grid: BTreeMap<String, f64>,
    /// Second exponent of `opnorm`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub q: Vec<f64>,
    /// Distance thresholds of `stability`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub delta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suite: Option<Suite>,
    pub out: Option<String>,
}

impl ExperimentSpec {
    /// The `#`-prefixed header line of CSV outputs.
    pub fn header_line(&self) -> Result<String, CliError> {
        Ok(format!("# {}", serde_json::to_string(self)?))
    }
}

/// Reads the spec back from a CSV (first `#` line) or JSON (`spec` field) output.
pub fn load_spec(path: &Path) -> Result<ExperimentSpec, CliError> {
    let mut first = String::new();
    BufReader::new(File::open(path)?).read_line(&mut first)?;
    if let Some(rest) = first.strip_prefix('#') {
        return Ok(serde_json::from_str(rest.trim())?);
    }
    #[derive(Deserialize)]
    struct Wrapped {
        spec: ExperimentSpec,
    }
    let w: Wrapped = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    Ok(w.spec)
}

/// Comma-separated reals.
pub fn parse_reals(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| {
            x.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format!("not a finite number: {x:?}"))
        })
        .collect()
}

/// Dimensions: a comma list, or `a..b` for the doubling grid `a, 2a, ...` up to `b`.
pub fn parse_dims(s: &str) -> Result<Vec<usize>, String> {
    let s = s.trim();
    if let Some((a, b)) = s.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| format!("bad range start in {s:?}"))?;
        let b: usize = b.trim().parse().map_err(|_| format!("bad range end in {s:?}"))?;
        if a == 0 || b < a {
            return Err(format!("empty dimension range {s:?}"));
        }
        let mut out = Vec::new();
        let mut n = a;
        while n <= b {
            out.push(n);
            n *= 2;
        }
        return Ok(out);
    }
    let out = s
        .split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| match x.parse::<usize>() {
            Ok(0) | Err(_) => Err(format!("not a positive dimension: {x:?}")),
            Ok(n) => Ok(n),
        })
        .collect::<Result<Vec<_>, _>>()?;
    if out.is_empty() {
        return Err("empty dimension list".into());
    }
    Ok(out)
}

/// Seeds: a bare count `k` means `0..k`, `a..b` is half-open and `a,b,c`
/// lists seeds explicitly (a single explicit seed is written `s..s+1`).
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    let s = s.trim();
    let out: Vec<u64> = if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| format!("bad seed range start in {s:?}"))?;
        let b: u64 = b.trim().parse().map_err(|_| format!("bad seed range end in {s:?}"))?;
        (a..b).collect()
    } else if s.contains(',') {
        s.split(',')
            .map(str::trim)
            .filter(|x| !x.is_empty())
            .map(|x| x.parse::<u64>().map_err(|_| format!("not a seed: {x:?}")))
            .collect::<Result<_, _>>()?
    } else if s.is_empty() {
        Vec::new()
    } else {
        let k: u64 = s.parse().map_err(|_| format!("not a seed count: {s:?}"))?;
        (0..k).collect()
    };
    if out.is_empty() {
        return Err("empty seed list".into());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dimension_ranges_double() {
        assert_eq!(parse_dims("512..8192").unwrap(), vec![512, 1024, 2048, 4096, 8192]);
        assert_eq!(parse_dims("256..2048").unwrap(), vec![256, 512, 1024, 2048]);
        assert_eq!(parse_dims("3, 5").unwrap(), vec![3, 5]);
        assert!(parse_dims("0").is_err());
        assert!(parse_dims("").is_err());
        assert!(parse_dims("8..4").is_err());
    }

    #[test]
    fn seed_syntax() {
        assert_eq!(parse_seeds("3").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_seeds("5..7").unwrap(), vec![5, 6]);
        assert_eq!(parse_seeds("4,9").unwrap(), vec![4, 9]);
        assert!(parse_seeds("").is_err());
        assert!(parse_seeds("0").is_err());
        assert!(parse_seeds("3..3").is_err());
    }

    #[test]
    fn reals_reject_non_finite() {
        assert_eq!(parse_reals("0.5,1,2").unwrap(), vec![0.5, 1.0, 2.0]);
        assert!(parse_reals("nan").is_err());
        assert!(parse_reals("x").is_err());
    }
}
