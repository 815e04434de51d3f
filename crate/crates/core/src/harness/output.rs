//! Result persistence: round CSV, seed summary, config echo, parameter
//! snapshots and long-format plot tables.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::DivergenceReport;
use crate::error::{FedError, Result};
use crate::fed::RoundRecord;
use crate::harness::config::load_config;
use crate::harness::run::ExperimentResult;
use crate::partition::HeterogeneityReport;

pub const ROUNDS_HEADER: &str =
    "seed,round,aggregator,sampled_clients,global_test_acc,mean_train_loss,weight_divergence,wallclock_ms";

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| FedError::io(dir, e))?;
    let name = path.file_name().ok_or_else(|| FedError::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = std::fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(bytes).and_then(|_| f.sync_all()))
        .and_then(|_| std::fs::rename(&tmp, path));
    result.map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        FedError::io(path, e)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Population standard deviation (0 for a single seed).
    pub std: f64,
    pub per_seed: Vec<f64>,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Stat { mean, std: var.sqrt(), per_seed: values.to_vec() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub aggregator: String,
    pub seeds: Vec<u64>,
    pub rounds: usize,
    pub final_acc: Stat,
    pub final_train_loss: Stat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_divergence: Option<Stat>,
    /// Per seed global divergence after every round.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub divergence_trajectory: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rounds_to_target: Option<Vec<Option<usize>>>,
}

pub fn summarize(result: &ExperimentResult) -> Summary {
    let cfg = &result.config;
    let last = |f: fn(&RoundRecord) -> f64| -> Vec<f64> {
        result.runs.iter().map(|r| f(r.rows.last().expect("at least one round"))).collect()
    };
    let tracked = result.runs.iter().all(|r| r.divergence.is_some());
    Summary {
        name: cfg.name.clone(),
        aggregator: cfg.aggregator.kind.name().to_string(),
        seeds: result.runs.iter().map(|r| r.seed).collect(),
        rounds: cfg.rounds,
        final_acc: Stat::of(&last(|r| r.global_test_acc)),
        final_train_loss: Stat::of(&last(|r| r.mean_train_loss)),
        final_divergence: tracked
            .then(|| Stat::of(&result.runs.iter().map(|r| r.divergence.as_ref().unwrap().global).collect::<Vec<_>>())),
        divergence_trajectory: tracked.then(|| {
            result.runs.iter().map(|r| r.rows.iter().filter_map(|row| row.weight_divergence).collect()).collect()
        }),
        target_acc: cfg.target_acc,
        rounds_to_target: cfg.target_acc.map(|_| result.runs.iter().map(|r| r.rounds_to_target).collect()),
    }
}

/// `rounds.csv` body: one row per round per seed.
pub fn rounds_csv(result: &ExperimentResult) -> String {
    let mut out = String::from(ROUNDS_HEADER);
    out.push('\n');
    for run in &result.runs {
        for r in &run.rows {
            let sampled: Vec<String> = r.sampled_clients.iter().map(usize::to_string).collect();
            let div = r.weight_divergence.map(|d| d.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                run.seed,
                r.round,
                r.aggregator,
                sampled.join(";"),
                r.global_test_acc,
                r.mean_train_loss,
                div,
                r.wallclock_ms
            )
            .expect("writing to a String");
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct SeedEntry<T> {
    seed: u64,
    report: T,
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(v).expect("result serializes");
    b.push(b'\n');
    b
}

/// Writes every artifact of a run into `dir` and returns the paths.
pub fn write_results(result: &ExperimentResult, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    let mut put = |name: String, bytes: Vec<u8>| -> Result<()> {
        let p = dir.join(name);
        write_atomic(&p, &bytes)?;
        paths.push(p);
        Ok(())
    };
    put("rounds.csv".into(), rounds_csv(result).into_bytes())?;
    put("summary.json".into(), json_bytes(&summarize(result)))?;
    put("config.json".into(), result.config.to_json().into_bytes())?;
    let partition: Vec<_> = result.runs.iter().map(|r| SeedEntry { seed: r.seed, report: &r.partition }).collect();
    put("partition.json".into(), json_bytes(&partition))?;
    if result.runs.iter().all(|r| r.divergence.is_some()) {
        let div: Vec<_> = result.runs.iter().map(|r| SeedEntry { seed: r.seed, report: r.divergence.as_ref() }).collect();
        put("divergence.json".into(), json_bytes(&div))?;
    }
    for run in &result.runs {
        let p = dir.join(format!("params_seed{}.bin", run.seed));
        run.final_params.save(&p)?;
        paths.push(p);
        if let Some(c) = &run.centralized_params {
            let p = dir.join(format!("centralized_seed{}.bin", run.seed));
            c.save(&p)?;
            paths.push(p);
        }
    }
    Ok(paths)
}

/// One parsed line of `rounds.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundRow {
    pub seed: u64,
    pub record: RoundRecord,
}

pub fn parse_rounds_csv(text: &str, origin: &Path) -> Result<Vec<RoundRow>> {
    let err = |line: usize, column: usize, message: String| FedError::Parse { path: origin.to_path_buf(), line, column, message };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == ROUNDS_HEADER => {}
        _ => return Err(err(1, 1, "unexpected rounds.csv header".into())),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(err(i + 1, 1, format!("expected 8 fields, found {}", f.len())));
        }
        fn num<T: FromStr>(s: &str) -> Option<T> {
            s.parse().ok()
        }
        let bad = |col: usize| err(i + 1, col, format!("cannot parse field `{}`", f[col - 1]));
        let sampled = if f[3].is_empty() {
            Vec::new()
        } else {
            f[3].split(';').map(num).collect::<Option<Vec<usize>>>().ok_or_else(|| bad(4))?
        };
        rows.push(RoundRow {
            seed: num(f[0]).ok_or_else(|| bad(1))?,
            record: RoundRecord {
                round: num(f[1]).ok_or_else(|| bad(2))?,
                aggregator: f[2].to_string(),
                sampled_clients: sampled,
                global_test_acc: num(f[4]).ok_or_else(|| bad(5))?,
                mean_train_loss: num(f[5]).ok_or_else(|| bad(6))?,
                weight_divergence: if f[6].is_empty() { None } else { Some(num(f[6]).ok_or_else(|| bad(7))?) },
                wallclock_ms: num(f[7]).ok_or_else(|| bad(8))?,
            },
        });
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    AccuracyVsRound,
    DivergenceVsRound,
    KsReport,
}

impl PlotKind {
    pub fn name(self) -> &'static str {
        match self {
            PlotKind::AccuracyVsRound => "accuracy_vs_round",
            PlotKind::DivergenceVsRound => "divergence_vs_round",
            PlotKind::KsReport => "ks_report",
        }
    }
}

impl FromStr for PlotKind {
    type Err = FedError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy_vs_round" => Ok(PlotKind::AccuracyVsRound),
            "divergence_vs_round" => Ok(PlotKind::DivergenceVsRound),
            "ks_report" => Ok(PlotKind::KsReport),
            other => Err(FedError::Config(format!(
                "unknown plot kind `{other}` (expected accuracy_vs_round, divergence_vs_round or ks_report)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlotRow {
    pub run_label: String,
    pub round: usize,
    pub metric: String,
    pub value: f64,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| FedError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read(path)?).map_err(|e| FedError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

/// Long-format rows for `kind` from a run directory.
pub fn plot_rows(run_dir: &Path, kind: PlotKind) -> Result<Vec<PlotRow>> {
    let cfg = load_config(&run_dir.join("config.json"), &[])?;
    let label = |seed: u64| format!("{}/seed{seed}", cfg.name);
    match kind {
        PlotKind::AccuracyVsRound | PlotKind::DivergenceVsRound => {
            let path = run_dir.join("rounds.csv");
            let rows = parse_rounds_csv(&read(&path)?, &path)?;
            let mut out = Vec::with_capacity(rows.len());
            for r in rows {
                let (metric, value) = match kind {
                    PlotKind::AccuracyVsRound => ("global_test_acc", r.record.global_test_acc),
                    _ => (
                        "weight_divergence",
                        r.record.weight_divergence.ok_or_else(|| {
                            FedError::Runtime(format!("{} has no divergence column; rerun with track_divergence", path.display()))
                        })?,
                    ),
                };
                out.push(PlotRow { run_label: label(r.seed), round: r.record.round, metric: metric.into(), value });
            }
            Ok(out)
        }
        PlotKind::KsReport => {
            let entries: Vec<SeedEntry<HeterogeneityReport>> = read_json(&run_dir.join("partition.json"))?;
            let mut out = Vec::new();
            for e in entries {
                for (metric, value) in [
                    ("mean_pairwise_ks", e.report.mean_pairwise_ks),
                    ("mean_client_vs_global_ks", e.report.mean_client_vs_global_ks),
                    ("size_ratio", e.report.size_ratio),
                ] {
                    out.push(PlotRow { run_label: label(e.seed), round: 0, metric: metric.into(), value });
                }
            }
            Ok(out)
        }
    }
}

/// Final-round divergence reports stored next to the round CSV.
pub fn read_divergence(run_dir: &Path) -> Result<Vec<(u64, DivergenceReport)>> {
    let entries: Vec<SeedEntry<DivergenceReport>> = read_json(&run_dir.join("divergence.json"))?;
    Ok(entries.into_iter().map(|e| (e.seed, e.report)).collect())
}

pub fn plot_csv(rows: &[PlotRow]) -> String {
    let mut out = String::from("run_label,round,metric,value\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.run_label, r.round, r.metric, r.value).expect("writing to a String");
    }
    out
}

/// Writes `plot_<kind>.csv` into the run directory.
pub fn emit_plot_data(run_dir: &Path, kind: PlotKind) -> Result<PathBuf> {
    let rows = plot_rows(run_dir, kind)?;
    let path = run_dir.join(format!("plot_{}.csv", kind.name()));
    write_atomic(&path, plot_csv(&rows).as_bytes())?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stat_mean_and_single_seed_std() {
        let s = Stat::of(&[0.5, 0.7]);
        assert!((s.mean - 0.6).abs() < 1e-15);
        assert_eq!(Stat::of(&[0.3]).std, 0.0);
    }

    #[test]
    fn atomic_write_overwrites() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/a.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn unknown_plot_kind() {
        assert!("loss_vs_round".parse::<PlotKind>().unwrap_err().is_config());
    }
}
