use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::stats::{bonferroni_adjust, wilcoxon_signed_rank};
use super::FoldResult;
use crate::error::{Error, Result};
use crate::models::Modality;
use crate::timecond::Strategy;

pub const ALPHA: f64 = 0.05;
const Z_95: f64 = 1.96;

/// Mean, 95% confidence half-width and best value over fold accuracies.
/// The half-width is `1.96 * sd / sqrt(n)` with the population sd.
pub fn summarize(accuracies: &[f64]) -> (f64, f64, f64) {
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let best = accuracies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, Z_95 * var.sqrt() / n.sqrt(), best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigSummary {
    pub modality: Modality,
    pub conditioning: Strategy,
    pub folds: usize,
    pub mean: f64,
    pub ci_half_width: f64,
    pub best: f64,
}

impl ConfigSummary {
    pub fn label(&self) -> String {
        format!("{}/{}", self.modality, self.conditioning.model_label())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseTest {
    pub a: (Modality, Strategy),
    pub b: (Modality, Strategy),
    /// Mean of `a - b` over matched folds.
    pub mean_difference: f64,
    pub p_value: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub configs: Vec<ConfigSummary>,
    /// Majority-class baseline over the distinct fold plans.
    pub baseline: (f64, f64, f64),
    pub folds_per_config: usize,
    pub tests: Vec<PairwiseTest>,
}

impl EvalReport {
    pub fn config(&self, modality: Modality, conditioning: Strategy) -> Option<&ConfigSummary> {
        self.configs
            .iter()
            .find(|c| c.modality == modality && c.conditioning == conditioning)
    }

    pub fn test(&self, a: (Modality, Strategy), b: (Modality, Strategy)) -> Option<&PairwiseTest> {
        self.tests.iter().find(|t| (t.a == a && t.b == b) || (t.a == b && t.b == a))
    }
}

type Key = (usize, usize, u64, Vec<String>);

/// Summarises each configuration and tests every pair of configurations on
/// their matched folds. All configurations must cover the same fold plans.
pub fn aggregate(records: &[FoldResult]) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Data("no fold records to aggregate".into()));
    }
    let mut by_config: BTreeMap<(Modality, Strategy), BTreeMap<Key, &FoldResult>> = BTreeMap::new();
    for r in records {
        let folds = by_config.entry((r.modality, r.conditioning)).or_default();
        if folds.insert(r.pairing_key(), r).is_some() {
            return Err(Error::Data(format!(
                "duplicate record for {}/{} repeat {} fold {}",
                r.modality,
                r.conditioning.model_label(),
                r.repeat,
                r.fold
            )));
        }
    }
    let reference: BTreeSet<&Key> = by_config.values().next().unwrap().keys().collect();
    for ((m, s), folds) in &by_config {
        if folds.keys().collect::<BTreeSet<_>>() != reference {
            return Err(Error::Data(format!(
                "{m}/{} was evaluated on different fold plans; paired comparison is impossible",
                s.model_label()
            )));
        }
    }

    let configs = by_config
        .iter()
        .map(|(&(modality, conditioning), folds)| {
            let accs: Vec<f64> = folds.values().map(|r| r.test_accuracy).collect();
            let (mean, ci_half_width, best) = summarize(&accs);
            ConfigSummary {
                modality,
                conditioning,
                folds: accs.len(),
                mean,
                ci_half_width,
                best,
            }
        })
        .collect();
    let baseline: Vec<f64> = by_config.values().next().unwrap().values().map(|r| r.baseline_accuracy).collect();

    let keys: Vec<&(Modality, Strategy)> = by_config.keys().collect();
    let mut tests = Vec::new();
    for i in 0..keys.len() {
        for j in i + 1..keys.len() {
            let a: Vec<f64> = by_config[keys[i]].values().map(|r| r.test_accuracy).collect();
            let b: Vec<f64> = by_config[keys[j]].values().map(|r| r.test_accuracy).collect();
            let w = wilcoxon_signed_rank(&a, &b)?;
            let mean_difference = a.iter().zip(&b).map(|(x, y)| x - y).sum::<f64>() / a.len() as f64;
            tests.push(PairwiseTest {
                a: *keys[i],
                b: *keys[j],
                mean_difference,
                p_value: w.p_value,
                significant: false,
            });
        }
    }
    if !tests.is_empty() {
        let flags = bonferroni_adjust(&tests.iter().map(|t| t.p_value).collect::<Vec<_>>(), ALPHA)?;
        for (t, f) in tests.iter_mut().zip(flags) {
            t.significant = f;
        }
    }
    Ok(EvalReport {
        configs,
        baseline: summarize(&baseline),
        folds_per_config: reference.len(),
        tests,
    })
}

fn cell(mean: f64, half: f64, best: f64) -> String {
    format!("{:.3} ± {:.3} ({:.3})", mean, half, best)
}

/// Accuracy grid (modality rows, strategy columns) plus the baseline row
/// and the pairwise significance list.
pub fn render_report(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "test accuracy: mean ± 95% CI (best fold) over {} folds",
        report.folds_per_config
    );
    let width = 24;
    let _ = write!(out, "{:<10}", "");
    for s in Strategy::ALL {
        let _ = write!(out, "{:<width$}", s.model_label());
    }
    out.push('\n');
    for m in Modality::ALL {
        if !report.configs.iter().any(|c| c.modality == m) {
            continue;
        }
        let _ = write!(out, "{:<10}", m.as_str());
        for s in Strategy::ALL {
            let text = report
                .config(m, s)
                .map(|c| cell(c.mean, c.ci_half_width, c.best))
                .unwrap_or_else(|| "-".into());
            let _ = write!(out, "{text:<width$}");
        }
        out.push('\n');
    }
    let (mean, half, best) = report.baseline;
    let _ = writeln!(out, "{:<10}{}", "baseline", cell(mean, half, best));
    if !report.tests.is_empty() {
        let _ = writeln!(
            out,
            "\npaired Wilcoxon signed-rank, Bonferroni m = {} at alpha = {ALPHA}:",
            report.tests.len()
        );
        for t in &report.tests {
            let _ = writeln!(
                out,
                "{:<14} vs {:<14} diff {:+.3}  p = {:.4}{}",
                format!("{}/{}", t.a.0, t.a.1.model_label()),
                format!("{}/{}", t.b.0, t.b.1.model_label()),
                t.mean_difference,
                t.p_value,
                if t.significant { "  *" } else { "" }
            );
        }
    }
    out
}

const RECORD_HEADER: [&str; 14] = [
    "modality",
    "conditioning",
    "repeat",
    "fold",
    "seed",
    "test_ids",
    "validation_ids",
    "test_windows",
    "test_accuracy",
    "baseline_accuracy",
    "epochs_run",
    "best_epoch",
    "best_validation_accuracy",
    "predictions",
];

/// One tab-separated row per fold. Floats use shortest round-trip form so
/// identical runs give identical bytes.
pub fn write_fold_records(records: &[FoldResult], path: &Path) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(Vec::new());
    w.write_record(RECORD_HEADER).map_err(csv_err)?;
    for r in records {
        let predictions: String = r.predictions.iter().map(|&p| if p == 1 { '1' } else { '0' }).collect();
        w.write_record([
            r.modality.to_string(),
            r.conditioning.to_string(),
            r.repeat.to_string(),
            r.fold.to_string(),
            r.seed.to_string(),
            r.test_ids.join(";"),
            r.validation_ids.join(";"),
            r.test_windows.to_string(),
            r.test_accuracy.to_string(),
            r.baseline_accuracy.to_string(),
            r.epochs_run.to_string(),
            r.best_epoch.to_string(),
            r.best_validation_accuracy.to_string(),
            predictions,
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_fold_records(path: &Path) -> Result<Vec<FoldResult>> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let headers = reader.headers().map_err(|e| Error::Data(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != RECORD_HEADER {
        return Err(Error::malformed(path, 1, "unexpected fold-record header"));
    }
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::malformed(path, line, e.to_string()))?;
        let field = |k: usize| &record[k];
        let parse = |k: usize| -> Result<f64> {
            field(k)
                .parse()
                .map_err(|_| Error::malformed(path, line, format!("`{}` is not a number", field(k))))
        };
        let int = |k: usize| -> Result<u64> {
            field(k)
                .parse()
                .map_err(|_| Error::malformed(path, line, format!("`{}` is not an integer", field(k))))
        };
        let ids = |k: usize| -> Vec<String> { field(k).split(';').filter(|s| !s.is_empty()).map(String::from).collect() };
        let predictions = field(13)
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                _ => Err(Error::malformed(path, line, "predictions must be 0/1 digits")),
            })
            .collect::<Result<Vec<u8>>>()?;
        out.push(FoldResult {
            modality: field(0).parse().map_err(|e: Error| Error::malformed(path, line, e.to_string()))?,
            conditioning: field(1).parse().map_err(|e: Error| Error::malformed(path, line, e.to_string()))?,
            repeat: int(2)? as usize,
            fold: int(3)? as usize,
            seed: int(4)?,
            test_ids: ids(5),
            validation_ids: ids(6),
            test_windows: int(7)? as usize,
            test_accuracy: parse(8)?,
            baseline_accuracy: parse(9)?,
            epochs_run: int(10)? as usize,
            best_epoch: int(11)? as usize,
            best_validation_accuracy: parse(12)?,
            predictions,
        });
    }
    Ok(out)
}
