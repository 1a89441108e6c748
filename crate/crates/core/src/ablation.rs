//! Four-variant ablation sweep over seeds on a shared split.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Variant};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::training::run_experiment;

/// One (variant, seed) training run; `error` is set when the run failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: Variant,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub best_accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub cells: Vec<AblationCell>,
}

/// Per-variant mean over the seeds that completed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariantMean {
    pub variant: Variant,
    pub accuracy: f64,
    pub f1: f64,
    pub runs: usize,
}

impl AblationReport {
    pub fn mean(&self, variant: Variant) -> Option<VariantMean> {
        let done: Vec<&AblationCell> = self
            .cells
            .iter()
            .filter(|c| c.variant == variant && c.error.is_none())
            .collect();
        if done.is_empty() {
            return None;
        }
        let n = done.len() as f64;
        Some(VariantMean {
            variant,
            accuracy: done.iter().filter_map(|c| c.accuracy).sum::<f64>() / n,
            f1: done.iter().filter_map(|c| c.f1).sum::<f64>() / n,
            runs: done.len(),
        })
    }

    pub fn means(&self) -> Vec<VariantMean> {
        Variant::ALL.iter().filter_map(|&v| self.mean(v)).collect()
    }

    /// `variant,seed,accuracy,f1,best_accuracy,status` rows, then one
    /// `mean` row per variant.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Runtime(format!("writing ablation csv: {e}"));
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        w.write_record(["variant", "seed", "accuracy", "f1", "best_accuracy", "status"]).map_err(err)?;
        for c in &self.cells {
            let status = match &c.error {
                Some(e) => format!("failed: {e}"),
                None => "ok".into(),
            };
            w.write_record([
                c.variant.to_string(),
                c.seed.to_string(),
                opt(c.accuracy),
                opt(c.f1),
                opt(c.best_accuracy),
                status,
            ])
            .map_err(err)?;
        }
        for m in self.means() {
            w.write_record([
                m.variant.to_string(),
                "mean".into(),
                format!("{:.6}", m.accuracy),
                format!("{:.6}", m.f1),
                String::new(),
                format!("{} runs", m.runs),
            ])
            .map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Runtime(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Runtime(e.to_string()))
    }

    /// Fixed-width table of per-seed accuracy/F1 with a mean column.
    pub fn render_table(&self) -> String {
        let mut seeds: Vec<u64> = self.cells.iter().map(|c| c.seed).collect();
        seeds.dedup();
        let mut out = String::new();
        let _ = write!(out, "{:<8}", "variant");
        for s in &seeds {
            let _ = write!(out, " {:>15}", format!("seed {s}"));
        }
        let _ = writeln!(out, " {:>15}", "mean");
        for v in Variant::ALL {
            let _ = write!(out, "{:<8}", v.name());
            for s in &seeds {
                let cell = self.cells.iter().find(|c| c.variant == v && c.seed == *s);
                let text = match cell {
                    Some(AblationCell {
                        accuracy: Some(a),
                        f1: Some(f),
                        error: None,
                        ..
                    }) => format!("{a:.4}/{f:.4}"),
                    Some(_) => "FAILED".into(),
                    None => "-".into(),
                };
                let _ = write!(out, " {text:>15}");
            }
            let mean = self
                .mean(v)
                .map(|m| format!("{:.4}/{:.4}", m.accuracy, m.f1))
                .unwrap_or_else(|| "-".into());
            let _ = writeln!(out, " {mean:>15}");
        }
        out.push_str("cells: final-epoch test accuracy/F1\n");
        out
    }
}

/// Trains every variant for every seed on the same split. A failing cell is
/// recorded and the sweep continues. With `out_dir`, each run writes to
/// `<variant>_seed<seed>/` and the sweep writes `ablation.csv` and
/// `ablation.txt`.
pub fn run_ablation(base: &RunConfig, seeds: &[u64], train: &Dataset, test: &Dataset, out_dir: Option<&Path>) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut cells = Vec::with_capacity(seeds.len() * Variant::ALL.len());
    for &seed in seeds {
        for variant in Variant::ALL {
            let mut cfg = base.clone();
            cfg.variant = variant;
            cfg.seed = seed;
            let dir = out_dir.map(|d| d.join(format!("{variant}_seed{seed}")));
            log::info!("ablation: {variant} seed {seed}");
            let cell = match run_experiment(&cfg, train, test, dir.as_deref(), None) {
                Ok(exp) => AblationCell {
                    variant,
                    seed,
                    accuracy: Some(exp.report.final_eval.accuracy),
                    f1: Some(exp.report.final_f1(&cfg)),
                    best_accuracy: Some(exp.report.best_accuracy),
                    error: None,
                },
                Err(e) => {
                    log::warn!("ablation: {variant} seed {seed} failed: {e}");
                    AblationCell {
                        variant,
                        seed,
                        accuracy: None,
                        f1: None,
                        best_accuracy: None,
                        error: Some(e.to_string()),
                    }
                }
            };
            cells.push(cell);
        }
    }
    let report = AblationReport { cells };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join("ablation.csv");
        std::fs::write(&csv_path, report.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        let txt = dir.join("ablation.txt");
        std::fs::write(&txt, report.render_table()).map_err(|e| Error::io(&txt, e))?;
    }
    Ok(report)
}
