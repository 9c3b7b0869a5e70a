//! One-parameter sweeps over any engine.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{relative_metrics, Metrics};
use crate::model::{ConfigError, Scenario};
use crate::ode::{integrate, trajectory_metrics, OdeSettings};
use crate::sim::{monte_carlo, summarize, MetricsSummary, Quantiles};
use crate::trace::{replay_many, replay_scenario, TraceNetwork};
use crate::CsvError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    /// Predator to prey seed ratio.
    Y,
    /// Every contact rate, scaled so the first intra rate equals the value.
    Beta,
    /// Total node count, split across groups in their current proportions.
    N,
    C,
    I,
    P,
    D,
    /// Size of the second group.
    GroupSize,
    Beta11,
    Beta12,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Y => "y",
            SweepParam::Beta => "beta",
            SweepParam::N => "n",
            SweepParam::C => "c",
            SweepParam::I => "i",
            SweepParam::P => "p",
            SweepParam::D => "d",
            SweepParam::GroupSize => "group_size",
            SweepParam::Beta11 => "beta11",
            SweepParam::Beta12 => "beta12",
        }
    }

    /// Parameters a trace replay can vary; the rest come from the trace.
    pub fn valid_for_trace(self) -> bool {
        matches!(self, SweepParam::Y | SweepParam::C | SweepParam::I | SweepParam::P | SweepParam::D)
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepParam {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let all = [
            SweepParam::Y,
            SweepParam::Beta,
            SweepParam::N,
            SweepParam::C,
            SweepParam::I,
            SweepParam::P,
            SweepParam::D,
            SweepParam::GroupSize,
            SweepParam::Beta11,
            SweepParam::Beta12,
        ];
        all.into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown sweep parameter `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    Ode,
    Sim,
    Trace,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Base scenario file, relative to the sweep file.
    pub scenario: PathBuf,
    pub param: SweepParam,
    pub values: Vec<f64>,
    pub engine: Engine,
    #[serde(default = "one")]
    pub runs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Association trace for the trace engine, relative to the sweep file.
    #[serde(default)]
    pub trace: Option<PathBuf>,
    #[serde(default)]
    pub batch_window: Option<f64>,
    #[serde(default)]
    pub step: Option<f64>,
}

#[derive(Debug, Error)]
pub enum SweepError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("values must not be empty")]
    NoValues,
    #[error("runs must be at least 1")]
    NoRuns,
    #[error("parameter `{0}` cannot be swept with the trace engine")]
    ParamNotForTrace(SweepParam),
    #[error("the trace engine needs a `trace` file")]
    MissingTrace,
    #[error("{0}")]
    Apply(String),
}

impl SweepSpec {
    pub fn from_toml_str(s: &str) -> Result<Self, SweepError> {
        let spec: SweepSpec = toml::from_str(s).map_err(ConfigError::from)?;
        spec.check()?;
        Ok(spec)
    }

    /// Loads a sweep file and resolves its relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SweepError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut spec = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        spec.scenario = base.join(&spec.scenario);
        spec.trace = spec.trace.map(|t| base.join(t));
        Ok(spec)
    }

    pub fn check(&self) -> Result<(), SweepError> {
        if self.values.is_empty() {
            return Err(SweepError::NoValues);
        }
        if self.runs == 0 {
            return Err(SweepError::NoRuns);
        }
        if self.engine == Engine::Trace {
            if !self.param.valid_for_trace() {
                return Err(SweepError::ParamNotForTrace(self.param));
            }
            if self.trace.is_none() {
                return Err(SweepError::MissingTrace);
            }
        }
        Ok(())
    }
}

/// Returns `base` with `param` set to `value`.
pub fn apply_param(base: &Scenario, param: SweepParam, value: f64) -> Result<Scenario, String> {
    let mut s = base.clone();
    let count = |v: f64| -> Result<u32, String> {
        if v >= 0.0 && v.fract() == 0.0 && v <= f64::from(u32::MAX) {
            Ok(v as u32)
        } else {
            Err(format!("{param} must be a whole non-negative count, got {value}"))
        }
    };
    match param {
        SweepParam::Y => {
            let prey: u32 = s.initial_prey.iter().sum();
            if prey == 0 {
                return Err("y needs at least one initial prey".into());
            }
            let target = count((value * f64::from(prey)).round())?;
            let current: u32 = s.initial_predator.iter().sum();
            if current == 0 {
                s.initial_predator.iter_mut().for_each(|v| *v = 0);
                s.initial_predator[0] = target;
            } else {
                // Keep the group pattern, fix rounding on the largest entry.
                let scale = f64::from(target) / f64::from(current);
                for v in &mut s.initial_predator {
                    *v = (f64::from(*v) * scale).round() as u32;
                }
                let got: u32 = s.initial_predator.iter().sum();
                let big = (0..s.initial_predator.len())
                    .max_by_key(|&n| s.initial_predator[n])
                    .unwrap_or(0);
                s.initial_predator[big] = (i64::from(s.initial_predator[big]) + i64::from(target) - i64::from(got)).max(0) as u32;
            }
        }
        SweepParam::Beta => {
            let reference = s.groups[0].intra_rate;
            if reference > 0.0 {
                let k = value / reference;
                s.groups.iter_mut().for_each(|g| g.intra_rate *= k);
                s.inter_rates.iter_mut().flatten().for_each(|r| *r *= k);
            } else {
                s.groups.iter_mut().for_each(|g| g.intra_rate = value);
                s.inter_rates.iter_mut().flatten().for_each(|r| *r = value);
            }
        }
        SweepParam::N => {
            let target = count(value)?;
            let total = s.total_nodes();
            if s.groups.len() == 1 || total == 0 {
                s.groups[0].n_nodes = target;
            } else {
                let mut assigned = 0;
                let last = s.groups.len() - 1;
                for g in &mut s.groups[..last] {
                    g.n_nodes = (f64::from(g.n_nodes) * f64::from(target) / total as f64).round() as u32;
                    assigned += g.n_nodes;
                }
                s.groups[last].n_nodes = target.saturating_sub(assigned);
            }
        }
        SweepParam::C => s.cooperation = value,
        SweepParam::I => s.immunization = value,
        SweepParam::P => s.on_prob = value,
        SweepParam::D => s.delay = value,
        SweepParam::GroupSize => {
            let n = count(value)?;
            s.groups.get_mut(1).ok_or("group_size needs a second group")?.n_nodes = n;
        }
        SweepParam::Beta11 => s.groups[0].intra_rate = value,
        SweepParam::Beta12 => {
            if s.groups.len() < 2 {
                return Err("beta12 needs a second group".into());
            }
            s.inter_rates[0][1] = value;
            s.inter_rates[1][0] = value;
        }
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointResult {
    pub value: f64,
    pub summary: MetricsSummary,
    /// N* for relative TI and MI; `None` when undefined.
    pub n_star: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOutcome {
    pub param: SweepParam,
    pub points: Vec<PointResult>,
    /// `(value, error)` for points that failed.
    pub failures: Vec<(f64, String)>,
}

fn n_star(scn: &Scenario) -> Option<f64> {
    relative_metrics(&Metrics::default(), scn).ok().map(|r| r.n_star)
}

/// Runs every point in parallel. Results keep the order of `values`.
pub fn run_sweep(spec: &SweepSpec, base: &Scenario, network: Option<&TraceNetwork>) -> Result<SweepOutcome, SweepError> {
    spec.check()?;
    if spec.engine == Engine::Trace && network.is_none() {
        return Err(SweepError::MissingTrace);
    }
    let settings = OdeSettings {
        step: spec.step.unwrap_or(OdeSettings::default().step),
        ..OdeSettings::default()
    };
    let results: Vec<(f64, Result<PointResult, String>)> = spec
        .values
        .par_iter()
        .map(|&value| {
            let point = (|| -> Result<PointResult, String> {
                let scn = apply_param(base, spec.param, value)?;
                match spec.engine {
                    Engine::Ode => {
                        let traj = integrate::<f64>(&scn, &settings).map_err(|e| e.to_string())?;
                        let m = trajectory_metrics(&traj, &scn, &settings);
                        Ok(PointResult {
                            value,
                            summary: summarize([&m]),
                            n_star: n_star(&scn),
                        })
                    }
                    Engine::Sim => Ok(PointResult {
                        value,
                        summary: monte_carlo(&scn, spec.runs, spec.seed).map_err(|e| e.to_string())?,
                        n_star: n_star(&scn),
                    }),
                    Engine::Trace => {
                        let net = network.expect("checked above");
                        let runs = replay_many(net, &scn, spec.runs, spec.seed).map_err(|e| e.to_string())?;
                        let adapted = replay_scenario(net, &scn).map_err(|e| e.to_string())?;
                        Ok(PointResult {
                            value,
                            summary: summarize(runs.iter().map(|r| &r.metrics)),
                            n_star: n_star(&adapted),
                        })
                    }
                }
            })();
            (value, point)
        })
        .collect();
    let mut outcome = SweepOutcome {
        param: spec.param,
        points: Vec::new(),
        failures: Vec::new(),
    };
    for (value, r) in results {
        match r {
            Ok(p) => outcome.points.push(p),
            Err(e) => outcome.failures.push((value, e)),
        }
    }
    Ok(outcome)
}

fn scaled(q: Quantiles, by: f64) -> Quantiles {
    Quantiles {
        median: q.median.map(|v| v / by),
        q1: q.q1.map(|v| v / by),
        q3: q.q3.map(|v| v / by),
    }
}

/// Long format: `param,value,metric,median,q1,q3,censored`, one row per
/// value and metric. Empty quantile cells fall on unreached runs.
pub fn write_sweep_csv<W: Write>(outcome: &SweepOutcome, w: W) -> Result<(), CsvError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["param", "value", "metric", "median", "q1", "q3", "censored"])?;
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for p in &outcome.points {
        let mut rows: Vec<(&str, Quantiles, usize)> = p.summary.rows().to_vec();
        if let Some(ns) = p.n_star {
            rows.push(("ti_rel", scaled(p.summary.ti, ns), 0));
            rows.push(("mi_rel", scaled(p.summary.mi, ns), 0));
        }
        for (name, q, censored) in rows {
            wr.write_record([
                outcome.param.name().to_string(),
                p.value.to_string(),
                name.to_string(),
                cell(q.median),
                cell(q.q1),
                cell(q.q3),
                censored.to_string(),
            ])?;
        }
    }
    wr.flush()?;
    Ok(())
}

/// A matplotlib script that draws one panel per metric from `csv_name`.
pub fn plot_script(csv_name: &str, param: SweepParam) -> String {
    let log_x = matches!(param, SweepParam::Y | SweepParam::Beta | SweepParam::Beta11 | SweepParam::Beta12);
    format!(
        r#"#!/usr/bin/env python3
# Plots {csv_name}: median with interquartile band for every metric.
import csv
import sys
from collections import defaultdict

import matplotlib.pyplot as plt

path = sys.argv[1] if len(sys.argv) > 1 else "{csv_name}"
series = defaultdict(list)
with open(path, newline="") as f:
    for row in csv.DictReader(f):
        if row["median"] == "":
            continue
        q1 = float(row["q1"]) if row["q1"] else float(row["median"])
        q3 = float(row["q3"]) if row["q3"] else float(row["median"])
        series[row["metric"]].append((float(row["value"]), float(row["median"]), q1, q3))

metrics = [m for m in ["ti", "mi", "tl", "al", "ta", "tr", "ti_rel", "mi_rel"] if m in series]
cols = 4
rows = (len(metrics) + cols - 1) // cols
fig, axes = plt.subplots(rows, cols, figsize=(4 * cols, 3 * rows), squeeze=False)
for ax, metric in zip(axes.flat, metrics):
    pts = sorted(series[metric])
    xs = [p[0] for p in pts]
    ax.plot(xs, [p[1] for p in pts], marker="o")
    ax.fill_between(xs, [p[2] for p in pts], [p[3] for p in pts], alpha=0.25)
    ax.set_xlabel("{param}")
    ax.set_title(metric)
    if {log_x}:
        ax.set_xscale("log")
for ax in list(axes.flat)[len(metrics):]:
    ax.axis("off")
fig.tight_layout()
fig.savefig(path.rsplit(".", 1)[0] + ".png", dpi=150)
"#,
        log_x = if log_x { "True" } else { "False" },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> Scenario {
        Scenario::uniform(1000, 5e-5, 1, 1, 20_000.0)
    }

    #[test]
    fn apply_examples() {
        let s = apply_param(&base(), SweepParam::Y, 10.0).unwrap();
        assert_eq!(s.initial_predator, vec![10]);
        let s = apply_param(&base(), SweepParam::Beta, 1e-4).unwrap();
        assert_eq!(s.groups[0].intra_rate, 1e-4);
        let s = apply_param(&base(), SweepParam::N, 400.0).unwrap();
        assert_eq!(s.total_nodes(), 400);
        assert!(apply_param(&base(), SweepParam::N, 4.5).is_err());
        assert!(apply_param(&base(), SweepParam::Beta12, 1e-6).is_err());
        let mut two = base();
        two.groups.push(crate::model::GroupParams {
            n_nodes: 100,
            intra_rate: 1e-5,
        });
        two.inter_rates = vec![vec![0.0, 1e-6], vec![1e-6, 0.0]];
        two.initial_prey = vec![1, 0];
        two.initial_predator = vec![0, 3];
        let s = apply_param(&two, SweepParam::Y, 7.0).unwrap();
        assert_eq!(s.initial_predator, vec![0, 7]);
        let s = apply_param(&two, SweepParam::Beta, 1e-4).unwrap();
        assert!((s.inter_rates[0][1] - 2e-6).abs() < 1e-18);
        let s = apply_param(&two, SweepParam::N, 550.0).unwrap();
        assert_eq!((s.groups[0].n_nodes, s.groups[1].n_nodes), (500, 50));
    }

    #[test]
    fn spec_parsing() {
        let spec = SweepSpec::from_toml_str(
            r#"
            scenario = "base.toml"
            param = "y"
            values = [1, 10]
            engine = "ode"
            "#,
        )
        .unwrap();
        assert_eq!(spec.runs, 1);
        assert_eq!(spec.param, SweepParam::Y);
        let err = SweepSpec::from_toml_str(
            r#"
            scenario = "b.toml"
            param = "n"
            values = [1]
            engine = "trace"
            trace = "t.csv"
            "#,
        )
        .unwrap_err();
        assert!(matches!(err, SweepError::ParamNotForTrace(SweepParam::N)));
        assert!(SweepSpec::from_toml_str("scenario='a'\nparam='y'\nvalues=[]\nengine='ode'").is_err());
    }

    #[test]
    fn ode_y_sweep_is_ordered_and_decreasing() {
        let spec = SweepSpec {
            scenario: "x".into(),
            param: SweepParam::Y,
            values: vec![1.0, 10.0, 100.0, 500.0, 5000.0],
            engine: Engine::Ode,
            runs: 1,
            seed: 0,
            trace: None,
            batch_window: None,
            step: None,
        };
        let out = run_sweep(&spec, &base(), None).unwrap();
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].0, 5000.0);
        let ti: Vec<f64> = out.points.iter().map(|p| p.summary.ti.median.unwrap()).collect();
        assert!(ti.windows(2).all(|w| w[1] <= w[0]), "{ti:?}");
        let mut buf = Vec::new();
        write_sweep_csv(&out, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("param,value,metric,median,q1,q3,censored\ny,1,ti,"));
        assert_eq!(text.lines().count(), 1 + 4 * 8);
        assert!(plot_script("sweep.csv", SweepParam::Y).contains("set_xscale"));
    }
}
