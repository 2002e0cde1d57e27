//! Confusion-matrix accumulation, per-class IoU, layer-weight statistics,
//! and report emission (CSV, JSON, newline-delimited run logs).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::IGNORE_INDEX;
use crate::error::{MlmpError, Result};

/// K x K pixel counts; rows index ground truth, columns index prediction.
/// Ignore-index pixels are never counted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            k: num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds every pixel with `label != 255`. Prediction values must lie in
    /// `[0, K-1]`.
    pub fn accumulate(&mut self, label: &[u8], prediction: &[u8]) -> Result<()> {
        if label.len() != prediction.len() {
            return Err(MlmpError::shape(
                format!("{} label pixels", label.len()),
                format!("{} prediction pixels", prediction.len()),
            ));
        }
        for (&t, &p) in label.iter().zip(prediction) {
            if t == IGNORE_INDEX {
                continue;
            }
            let (t, p) = (t as usize, p as usize);
            if t >= self.k {
                return Err(MlmpError::invalid(format!(
                    "label value {t} outside the {}-class space",
                    self.k
                )));
            }
            if p >= self.k {
                return Err(MlmpError::invalid(format!(
                    "prediction value {p} outside the {}-class space",
                    self.k
                )));
            }
            self.counts[t * self.k + p] += 1;
        }
        Ok(())
    }

    /// Merges a partial matrix accumulated elsewhere.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(MlmpError::shape(
                format!("{}x{} matrix", self.k, self.k),
                format!("{}x{}", other.k, other.k),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn miou(&self) -> Result<MiouResult> {
        self.miou_with(None)
    }

    /// Per-class IoU and their mean. Classes with zero union are excluded
    /// from the mean; `exclude_class` drops one more class (the background)
    /// from the mean on request.
    pub fn miou_with(&self, exclude_class: Option<usize>) -> Result<MiouResult> {
        let mut per_class = vec![None; self.k];
        let mut sum = 0.0;
        let mut counted = 0usize;
        for (c, slot) in per_class.iter_mut().enumerate() {
            let diag = self.count(c, c);
            let row: u64 = (0..self.k).map(|j| self.count(c, j)).sum();
            let col: u64 = (0..self.k).map(|i| self.count(i, c)).sum();
            let union = row + col - diag;
            if union == 0 {
                continue;
            }
            let iou = diag as f64 / union as f64;
            *slot = Some(iou);
            if Some(c) != exclude_class {
                sum += iou;
                counted += 1;
            }
        }
        if counted == 0 {
            return Err(MlmpError::invalid(
                "no class has any ground-truth or predicted pixels",
            ));
        }
        Ok(MiouResult {
            per_class,
            mean: sum / counted as f64,
        })
    }
}

#[derive(Debug, Clone)]
pub struct MiouResult {
    /// IoU per class; `None` where the union is empty.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// One line of the newline-delimited run log: a single adapted batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub dataset: String,
    pub corruption: String,
    pub method: String,
    pub repeat: usize,
    pub batch_id: usize,
    pub losses: Vec<f64>,
    pub alpha: Vec<f64>,
    /// 1-indexed first block of the evaluated layer range (for axis labels).
    pub first_layer: usize,
    pub aborted: bool,
    pub duration_ms: f64,
}

pub fn write_run_log(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| MlmpError::Serialization(e.to_string()))?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| MlmpError::io(path.display().to_string(), e))
}

pub fn read_run_log(path: &Path) -> Result<Vec<RunRecord>> {
    let body =
        std::fs::read_to_string(path).map_err(|e| MlmpError::io(path.display().to_string(), e))?;
    body.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| MlmpError::Serialization(e.to_string())))
        .collect()
}

/// Mean and population standard deviation of the per-layer weights,
/// grouped by (dataset, corruption).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LayerWeightStat {
    pub dataset: String,
    pub corruption: String,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub batches: usize,
}

pub fn layer_weight_stats(records: &[RunRecord]) -> Result<Vec<LayerWeightStat>> {
    let with_alpha: Vec<&RunRecord> = records.iter().filter(|r| !r.alpha.is_empty()).collect();
    if with_alpha.is_empty() {
        return Err(MlmpError::invalid("run log holds no layer weights"));
    }
    let mut groups: BTreeMap<(String, String), Vec<&[f64]>> = BTreeMap::new();
    for r in with_alpha {
        groups
            .entry((r.dataset.clone(), r.corruption.clone()))
            .or_default()
            .push(&r.alpha);
    }
    let mut stats = Vec::with_capacity(groups.len());
    for ((dataset, corruption), alphas) in groups {
        let layers = alphas[0].len();
        for a in &alphas {
            if a.len() != layers {
                return Err(MlmpError::shape(
                    format!("{layers} layer weights"),
                    format!("{}", a.len()),
                ));
            }
        }
        let n = alphas.len() as f64;
        let mut mean = vec![0.0; layers];
        for a in &alphas {
            for (m, &v) in mean.iter_mut().zip(a.iter()) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut std = vec![0.0; layers];
        for a in &alphas {
            for (s, (&v, &m)) in std.iter_mut().zip(a.iter().zip(&mean)) {
                *s += (v - m) * (v - m);
            }
        }
        for s in std.iter_mut() {
            *s = (*s / n).sqrt();
        }
        stats.push(LayerWeightStat {
            dataset,
            corruption,
            mean,
            std,
            batches: alphas.len(),
        });
    }
    Ok(stats)
}

/// One experiment cell: a (dataset, corruption, method) triple with the mIoU
/// of each repeat. Missing repeats stay `None` and downgrade the report to a
/// warning.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub dataset: String,
    pub corruption: String,
    pub method: String,
    pub repeats: Vec<Option<f64>>,
    pub miou_mean: Option<f64>,
    pub miou_std: Option<f64>,
}

impl ScenarioResult {
    pub fn from_repeats(
        dataset: impl Into<String>,
        corruption: impl Into<String>,
        method: impl Into<String>,
        repeats: Vec<Option<f64>>,
    ) -> Self {
        let present: Vec<f64> = repeats.iter().flatten().copied().collect();
        let (mean, std) = if present.is_empty() || present.len() != repeats.len() {
            (None, None)
        } else {
            let n = present.len() as f64;
            let mean = present.iter().sum::<f64>() / n;
            let var = present.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            (Some(mean), Some(var.sqrt()))
        };
        ScenarioResult {
            dataset: dataset.into(),
            corruption: corruption.into(),
            method: method.into(),
            repeats,
            miou_mean: mean,
            miou_std: std,
        }
    }
}

/// The corruption label used for uncorrupted data.
pub const ORIGINAL: &str = "original";
/// Row label for the mean over the 15 corruption kinds.
pub const C_AVERAGE: &str = "-C Average";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config_fingerprint: String,
    pub scenarios: Vec<ScenarioResult>,
    /// Rows appended per (dataset, method) when all 15 corruption kinds are
    /// present: the arithmetic mean of their mIoU means.
    pub c_average: Vec<ScenarioResult>,
    pub warning: bool,
}

/// Assembles the report, appending a "-C Average" row for every
/// (dataset, method) pair that covered the full corruption suite.
pub fn build_report(config_fingerprint: String, mut scenarios: Vec<ScenarioResult>) -> RunReport {
    scenarios.sort_by(|a, b| {
        (&a.dataset, &a.method, &a.corruption).cmp(&(&b.dataset, &b.method, &b.corruption))
    });
    let mut groups: BTreeMap<(String, String), Vec<&ScenarioResult>> = BTreeMap::new();
    for s in &scenarios {
        if s.corruption != ORIGINAL {
            groups
                .entry((s.dataset.clone(), s.method.clone()))
                .or_default()
                .push(s);
        }
    }
    let mut c_average = Vec::new();
    for ((dataset, method), rows) in groups {
        let kinds: std::collections::HashSet<&str> =
            rows.iter().map(|r| r.corruption.as_str()).collect();
        if kinds.len() != crate::corrupt::ALL_KINDS.len()
            || !crate::corrupt::ALL_KINDS
                .iter()
                .all(|k| kinds.contains(k.name()))
        {
            continue;
        }
        let means: Option<Vec<f64>> = rows.iter().map(|r| r.miou_mean).collect();
        if let Some(means) = means {
            let mean = means.iter().sum::<f64>() / means.len() as f64;
            c_average.push(ScenarioResult {
                dataset,
                corruption: C_AVERAGE.to_string(),
                method,
                repeats: vec![],
                miou_mean: Some(mean),
                miou_std: None,
            });
        }
    }
    let warning = scenarios.iter().any(|s| s.miou_mean.is_none());
    RunReport {
        config_fingerprint,
        scenarios,
        c_average,
        warning,
    }
}

pub fn write_report_json(report: &RunReport, path: &Path) -> Result<()> {
    let body = serde_json::to_vec_pretty(report)
        .map_err(|e| MlmpError::Serialization(e.to_string()))?;
    std::fs::write(path, body).map_err(|e| MlmpError::io(path.display().to_string(), e))
}

pub fn read_report_json(path: &Path) -> Result<RunReport> {
    let body =
        std::fs::read(path).map_err(|e| MlmpError::io(path.display().to_string(), e))?;
    serde_json::from_slice(&body).map_err(|e| MlmpError::Serialization(e.to_string()))
}

pub fn write_report_csv(report: &RunReport, path: &Path) -> Result<()> {
    let mut out = String::from("dataset,corruption,method,miou_mean,miou_std,repeats\n");
    for row in report.scenarios.iter().chain(&report.c_average) {
        let repeats = row
            .repeats
            .iter()
            .map(|r| match r {
                Some(v) => format!("{v:.6}"),
                None => "null".to_string(),
            })
            .collect::<Vec<_>>()
            .join(";");
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.dataset,
            row.corruption,
            row.method,
            row.miou_mean.map_or("null".into(), |v| format!("{v:.6}")),
            row.miou_std.map_or("null".into(), |v| format!("{v:.6}")),
            repeats
        ));
    }
    std::fs::write(path, out).map_err(|e| MlmpError::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulate_skips_ignore_and_counts_diagonal() {
        let mut cm = ConfusionMatrix::new(3);
        let all_ignore = vec![IGNORE_INDEX; 16];
        let pred = vec![1u8; 16];
        cm.accumulate(&all_ignore, &pred).unwrap();
        assert_eq!(cm.total(), 0);

        let label = vec![2u8; 100];
        let perfect = vec![2u8; 100];
        cm.accumulate(&label, &perfect).unwrap();
        assert_eq!(cm.count(2, 2), 100);
        assert_eq!(cm.total(), 100);
    }

    #[test]
    fn accumulate_matches_double_loop_oracle() {
        let mut rng_state = 123u64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (rng_state >> 33) as u8
        };
        let label: Vec<u8> = (0..256)
            .map(|_| {
                let v = next() % 5;
                if v == 4 {
                    IGNORE_INDEX
                } else {
                    v
                }
            })
            .collect();
        let pred: Vec<u8> = (0..256).map(|_| next() % 4).collect();
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&label, &pred).unwrap();

        let mut oracle = [0u64; 16];
        for i in 0..256 {
            if label[i] != IGNORE_INDEX {
                oracle[label[i] as usize * 4 + pred[i] as usize] += 1;
            }
        }
        for t in 0..4 {
            for p in 0..4 {
                assert_eq!(cm.count(t, p), oracle[t * 4 + p]);
            }
        }
    }

    #[test]
    fn accumulate_validates_inputs() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.accumulate(&[0, 1], &[0]).is_err());
        assert!(cm.accumulate(&[0, 1], &[0, 2]).is_err());
    }

    #[test]
    fn miou_perfect_and_disjoint() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1, 1, 2], &[0, 1, 1, 2]).unwrap();
        let r = cm.miou().unwrap();
        assert_eq!(r.mean, 1.0);
        for iou in r.per_class.iter().flatten() {
            assert_eq!(*iou, 1.0);
        }

        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 0], &[1, 1]).unwrap();
        let r = cm.miou().unwrap();
        assert_eq!(r.per_class[0], Some(0.0));
        assert_eq!(r.per_class[1], Some(0.0));
    }

    #[test]
    fn miou_excludes_zero_union_classes() {
        let mut cm = ConfusionMatrix::new(4);
        // classes 2 and 3 never appear
        cm.accumulate(&[0, 0, 1], &[0, 1, 1]).unwrap();
        let r = cm.miou().unwrap();
        assert!(r.per_class[2].is_none() && r.per_class[3].is_none());
        // class0: diag 1, union 2 -> 0.5 ; class1: diag 1, union 2 -> 0.5
        assert!((r.mean - 0.5).abs() < 1e-12);

        let empty = ConfusionMatrix::new(3);
        assert!(empty.miou().is_err());
    }

    #[test]
    fn miou_background_exclusion() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
        let full = cm.miou().unwrap();
        let fg = cm.miou_with(Some(0)).unwrap();
        // class0 IoU = 1/2, class1 IoU = 2/3
        assert!((full.mean - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((fg.mean - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn merge_is_additive() {
        let label_a = vec![0u8, 1, 2, 1];
        let pred_a = vec![0u8, 1, 1, 1];
        let label_b = vec![2u8, 2, 0];
        let pred_b = vec![2u8, 0, 0];
        let mut whole = ConfusionMatrix::new(3);
        whole.accumulate(&label_a, &pred_a).unwrap();
        whole.accumulate(&label_b, &pred_b).unwrap();

        let mut part1 = ConfusionMatrix::new(3);
        part1.accumulate(&label_a, &pred_a).unwrap();
        let mut part2 = ConfusionMatrix::new(3);
        part2.accumulate(&label_b, &pred_b).unwrap();
        part1.merge(&part2).unwrap();
        assert_eq!(whole, part1);
    }

    #[test]
    fn layer_weight_stats_population_std() {
        let rec = |alpha: Vec<f64>| RunRecord {
            dataset: "toy".into(),
            corruption: ORIGINAL.into(),
            method: "mlmp".into(),
            repeat: 0,
            batch_id: 0,
            losses: vec![],
            alpha,
            first_layer: 1,
            aborted: false,
            duration_ms: 0.0,
        };
        let stats = layer_weight_stats(&[rec(vec![1.0, 0.0]), rec(vec![0.0, 1.0])]).unwrap();
        assert_eq!(stats.len(), 1);
        assert_eq!(stats[0].mean, vec![0.5, 0.5]);
        assert_eq!(stats[0].std, vec![0.5, 0.5]);

        let constant = layer_weight_stats(&[rec(vec![0.3, 0.7]), rec(vec![0.3, 0.7])]).unwrap();
        assert_eq!(constant[0].std, vec![0.0, 0.0]);

        assert!(layer_weight_stats(&[]).is_err());

        // 100 seeded batches against a direct recomputation
        let mut state = 9u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64) / (u32::MAX as f64)
        };
        let mut alphas = Vec::new();
        for _ in 0..100 {
            let a = next();
            let b = next();
            let sum = a + b + 1e-9;
            alphas.push(vec![a / sum, b / sum]);
        }
        let records: Vec<RunRecord> = alphas.iter().map(|a| rec(a.clone())).collect();
        let stats = layer_weight_stats(&records).unwrap();
        for l in 0..2 {
            let mean: f64 = alphas.iter().map(|a| a[l]).sum::<f64>() / 100.0;
            let var: f64 = alphas.iter().map(|a| (a[l] - mean).powi(2)).sum::<f64>() / 100.0;
            assert!((stats[0].mean[l] - mean).abs() < 1e-12);
            assert!((stats[0].std[l] - var.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn scenario_stats_match_direct_recomputation() {
        let s = ScenarioResult::from_repeats(
            "v20",
            "snow",
            "mlmp",
            vec![Some(0.70), Some(0.74), Some(0.72)],
        );
        assert!((s.miou_mean.unwrap() - 0.72).abs() < 1e-12);
        let var = ((0.70f64 - 0.72).powi(2) + (0.74f64 - 0.72).powi(2) + 0.0) / 3.0;
        assert!((s.miou_std.unwrap() - var.sqrt()).abs() < 1e-12);

        let partial =
            ScenarioResult::from_repeats("v20", "snow", "mlmp", vec![Some(0.7), None]);
        assert!(partial.miou_mean.is_none());
    }

    #[test]
    fn report_roundtrip_and_c_average() {
        let mut scenarios = Vec::new();
        for (i, kind) in crate::corrupt::ALL_KINDS.iter().enumerate() {
            scenarios.push(ScenarioResult::from_repeats(
                "toy",
                kind.name(),
                "mlmp",
                vec![Some(0.5 + i as f64 * 0.01)],
            ));
        }
        scenarios.push(ScenarioResult::from_repeats(
            "toy",
            ORIGINAL,
            "mlmp",
            vec![Some(0.9)],
        ));
        let report = build_report("fp".into(), scenarios);
        assert!(!report.warning);
        assert_eq!(report.c_average.len(), 1);
        let expect: f64 = (0..15).map(|i| 0.5 + i as f64 * 0.01).sum::<f64>() / 15.0;
        assert!((report.c_average[0].miou_mean.unwrap() - expect).abs() < 1e-9);

        let dir = tempfile::tempdir().unwrap();
        let jp = dir.path().join("report.json");
        write_report_json(&report, &jp).unwrap();
        let back = read_report_json(&jp).unwrap();
        assert_eq!(
            serde_json::to_string(&report).unwrap(),
            serde_json::to_string(&back).unwrap()
        );
        write_report_csv(&report, &dir.path().join("report.csv")).unwrap();
    }

    #[test]
    fn run_log_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runlog.ndjson");
        let records = vec![RunRecord {
            dataset: "toy".into(),
            corruption: "gaussian_noise".into(),
            method: "mlmp".into(),
            repeat: 1,
            batch_id: 3,
            losses: vec![1.0, 0.9],
            alpha: vec![0.4, 0.6],
            first_layer: 3,
            aborted: false,
            duration_ms: 12.5,
        }];
        write_run_log(&path, &records).unwrap();
        let back = read_run_log(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].losses, records[0].losses);
        assert_eq!(back[0].alpha, records[0].alpha);
    }

    #[test]
    fn miou_permutation_equivariance() {
        // relabel classes consistently; per-class IoUs permute, mean unchanged
        let label = vec![0u8, 0, 1, 1, 2, 2, 0, 1];
        let pred = vec![0u8, 1, 1, 2, 2, 2, 0, 0];
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&label, &pred).unwrap();
        let base = cm.miou().unwrap();

        let perm = [2u8, 0, 1]; // class c -> perm[c]
        let plabel: Vec<u8> = label.iter().map(|&c| perm[c as usize]).collect();
        let ppred: Vec<u8> = pred.iter().map(|&c| perm[c as usize]).collect();
        let mut pcm = ConfusionMatrix::new(3);
        pcm.accumulate(&plabel, &ppred).unwrap();
        let permuted = pcm.miou().unwrap();

        assert!((base.mean - permuted.mean).abs() < 1e-12);
        for (c, &target) in perm.iter().enumerate() {
            assert_eq!(base.per_class[c], permuted.per_class[target as usize]);
        }
    }
}
