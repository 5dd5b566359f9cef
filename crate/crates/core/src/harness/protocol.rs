use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pdle::EncodingMode;
use crate::LabeledImage;

use super::config::{Protocol, TrainConfig};
use super::train::{split_protocol, train_on, RunReport};

pub const K_SWEEP: [usize; 7] = [1, 2, 3, 5, 10, 17, 20];
pub const RUNS_CSV: &str = "runs.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const TABLE_JSON: &str = "table.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Intra,
    LeaveOneOut,
    Ablation,
    KSweep,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Suite> {
        match s {
            "intra" => Ok(Suite::Intra),
            "leave-one-out" | "loo" => Ok(Suite::LeaveOneOut),
            "ablation" => Ok(Suite::Ablation),
            "k-sweep" | "ksweep" => Ok(Suite::KSweep),
            other => Err(Error::Config(format!("unknown protocol suite '{other}'"))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Intra => "intra",
            Suite::LeaveOneOut => "leave-one-out",
            Suite::Ablation => "ablation",
            Suite::KSweep => "k-sweep",
        })
    }
}

/// The four ablation variants, in table order.
pub const ABLATION_VARIANTS: [(&str, EncodingMode); 4] = [
    ("w/o PE&LE", EncodingMode::Off),
    ("w/o PE", EncodingMode::LabelOnly),
    ("w/o LE", EncodingMode::PatchOnly),
    ("full", EncodingMode::Full),
];

/// Which runs a suite expands to, beyond the base configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolPlan {
    pub seeds: Vec<u64>,
    /// Domains to hold out in turn. Empty means every domain present in the
    /// data. Ignored by the intra suite and, for ablation and k-sweep, when
    /// the base protocol is intra.
    pub held_out: Vec<usize>,
    pub k_values: Vec<usize>,
}

impl Default for ProtocolPlan {
    fn default() -> Self {
        ProtocolPlan {
            seeds: vec![0],
            held_out: Vec::new(),
            k_values: K_SWEEP.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub suite: Suite,
    pub variant: String,
    pub k: usize,
    pub seed: u64,
    pub held_out: Option<usize>,
    pub auc: f64,
    pub eer: f64,
    pub tau: f64,
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
    pub hter: f64,
    pub train_auc: f64,
    pub train_acer: f64,
    pub final_loss: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub k: usize,
    pub runs: usize,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub mean_eer: f64,
    pub mean_acer: f64,
    pub mean_hter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub suite: Suite,
    pub runs: Vec<RunRow>,
    /// One row per variant (ablation), per K (k-sweep) or a single row.
    pub summary: Vec<SummaryRow>,
}

impl ComparisonTable {
    pub fn summary_for(&self, variant: &str) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.variant == variant)
    }
}

struct Job {
    variant: String,
    cfg: TrainConfig,
}

fn row(suite: Suite, variant: &str, report: &RunReport) -> RunRow {
    let m = &report.metrics;
    let cfg = &report.config;
    RunRow {
        suite,
        variant: variant.to_string(),
        k: cfg.k,
        seed: cfg.seed,
        held_out: match cfg.protocol {
            Protocol::LeaveOneOut { held_out } => Some(held_out),
            Protocol::Intra => None,
        },
        auc: m.auc,
        eer: m.eer,
        tau: m.tau,
        apcer: m.apcer,
        bpcer: m.bpcer,
        acer: m.acer,
        hter: m.hter,
        train_auc: report.train_metrics.auc,
        train_acer: report.train_metrics.acer,
        final_loss: report.epochs.last().map_or(f64::NAN, |e| e.total),
        epochs: report.epochs.len(),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn summarize(runs: &[RunRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, usize)> = Vec::new();
    for r in runs {
        if !keys.iter().any(|(v, k)| *v == r.variant && *k == r.k) {
            keys.push((r.variant.clone(), r.k));
        }
    }
    keys.into_iter()
        .map(|(variant, k)| {
            let group: Vec<&RunRow> = runs.iter().filter(|r| r.variant == variant && r.k == k).collect();
            let pick = |f: fn(&RunRow) -> f64| group.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let aucs = pick(|r| r.auc);
            let m = mean(&aucs);
            let std_auc = if aucs.len() > 1 {
                (aucs.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (aucs.len() - 1) as f64).sqrt()
            } else {
                0.0
            };
            SummaryRow {
                variant,
                k,
                runs: group.len(),
                mean_auc: m,
                std_auc,
                mean_eer: mean(&pick(|r| r.eer)),
                mean_acer: mean(&pick(|r| r.acer)),
                mean_hter: mean(&pick(|r| r.hter)),
            }
        })
        .collect()
}

fn held_out_domains(plan: &ProtocolPlan, images: &[LabeledImage]) -> Vec<usize> {
    if !plan.held_out.is_empty() {
        return plan.held_out.clone();
    }
    let mut d: Vec<usize> = images.iter().map(|i| i.domain).collect();
    d.sort_unstable();
    d.dedup();
    d
}

/// Expands `suite` into training runs over `images`, executes them in order
/// and tabulates the test metrics. Each run's outputs are written to a
/// subdirectory of `out_dir` when given, together with the CSV and JSON
/// tables.
pub fn run_protocol(
    suite: Suite,
    base: &TrainConfig,
    images: &[LabeledImage],
    plan: &ProtocolPlan,
    out_dir: Option<&Path>,
) -> Result<ComparisonTable> {
    base.validate()?;
    if plan.seeds.is_empty() {
        return Err(Error::Config("protocol needs at least one seed".into()));
    }
    let variants: Vec<(String, TrainConfig)> = match suite {
        Suite::Intra | Suite::LeaveOneOut => vec![(base.encoding_name(), base.clone())],
        Suite::Ablation => ABLATION_VARIANTS
            .iter()
            .map(|(name, mode)| {
                (
                    name.to_string(),
                    TrainConfig {
                        encoding: *mode,
                        ..base.clone()
                    },
                )
            })
            .collect(),
        Suite::KSweep => {
            if plan.k_values.is_empty() {
                return Err(Error::Config("k-sweep needs at least one K".into()));
            }
            plan.k_values
                .iter()
                .map(|&k| (format!("K={k}"), TrainConfig { k, ..base.clone() }))
                .collect()
        }
    };
    let protocols: Vec<Protocol> = match (suite, base.protocol) {
        (Suite::Intra, _) => vec![Protocol::Intra],
        (Suite::LeaveOneOut, _) | (_, Protocol::LeaveOneOut { .. }) => held_out_domains(plan, images)
            .into_iter()
            .map(|held_out| Protocol::LeaveOneOut { held_out })
            .collect(),
        (_, Protocol::Intra) => vec![Protocol::Intra],
    };

    let mut jobs = Vec::new();
    for (variant, cfg) in &variants {
        for &seed in &plan.seeds {
            for &protocol in &protocols {
                jobs.push(Job {
                    variant: variant.clone(),
                    cfg: TrainConfig {
                        seed,
                        protocol,
                        ..cfg.clone()
                    },
                });
            }
        }
    }

    let mut runs = Vec::with_capacity(jobs.len());
    for (i, job) in jobs.iter().enumerate() {
        let (train, test) = split_protocol(
            images.to_vec(),
            job.cfg.protocol,
            job.cfg.intra_test_fraction,
            job.cfg.seed,
        )?;
        let run_dir = out_dir.map(|d| d.join(format!("run_{i:03}")));
        let outcome = train_on(&job.cfg, &train, &test, run_dir.as_deref())?;
        runs.push(row(suite, &job.variant, &outcome.report));
    }
    let table = ComparisonTable {
        suite,
        summary: summarize(&runs),
        runs,
    };
    if let Some(dir) = out_dir {
        write_table(dir, &table)?;
    }
    Ok(table)
}

/// Writes `runs.csv`, `summary.csv` and `table.json` into `dir`.
pub fn write_table(dir: &Path, table: &ComparisonTable) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join(RUNS_CSV))?;
    for r in &table.runs {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join(SUMMARY_CSV))?;
    for r in &table.summary {
        w.serialize(r)?;
    }
    w.flush()?;
    fs::write(dir.join(TABLE_JSON), serde_json::to_vec_pretty(table)?)?;
    Ok(())
}
