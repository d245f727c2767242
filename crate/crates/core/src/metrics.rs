//! Classification 0/1 exact ratio and segmentation mIoU, per fold and averaged.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::Prediction;
use crate::canvas::BinaryMask;
use crate::episode::{ClassId, Episode};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("mask dimensions differ: {0:?} vs {1:?}")]
    DimensionMismatch((u32, u32), (u32, u32)),
    #[error("prediction classes {predicted:?} do not match episode classes {expected:?}")]
    KeyMismatch { expected: Vec<ClassId>, predicted: Vec<ClassId> },
    #[error("no scores to aggregate")]
    EmptyInput,
}

/// Intersection over union; 1.0 when both masks are empty.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MetricsError> {
    if a.dims() != b.dims() {
        return Err(MetricsError::DimensionMismatch(a.dims(), b.dims()));
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        inter += (x && y) as u64;
        union += (x || y) as u64;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeScore {
    pub episode_id: String,
    pub fold: u8,
    pub exact_match: bool,
    /// Only classes that are present in the ground truth or the prediction.
    pub per_class_iou: BTreeMap<ClassId, f64>,
    pub failed: bool,
}

pub fn score_episode(episode: &Episode, prediction: &Prediction) -> Result<EpisodeScore, MetricsError> {
    let expected = episode.class_ids();
    let predicted: Vec<ClassId> = prediction.presence.keys().copied().collect();
    let mask_keys: Vec<ClassId> = prediction.masks.keys().copied().collect();
    if expected != predicted || expected != mask_keys {
        return Err(MetricsError::KeyMismatch { expected, predicted });
    }
    let mut per_class_iou = BTreeMap::new();
    if prediction.failed {
        for (&c, &gt) in &episode.gt_presence {
            if gt {
                per_class_iou.insert(c, 0.0);
            }
        }
        return Ok(EpisodeScore {
            episode_id: episode.episode_id.clone(),
            fold: episode.spec.fold,
            exact_match: false,
            per_class_iou,
            failed: true,
        });
    }
    for (&c, &gt) in &episode.gt_presence {
        let pred = prediction.presence[&c];
        if gt || pred {
            per_class_iou.insert(c, iou(&prediction.masks[&c], &episode.gt_masks[&c])?);
        }
    }
    Ok(EpisodeScore {
        episode_id: episode.episode_id.clone(),
        fold: episode.spec.fold,
        exact_match: prediction.presence == episode.gt_presence,
        per_class_iou,
        failed: false,
    })
}

/// How recorded IoU values are averaged within a fold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiouMode {
    /// Mean over all episode-class pairs.
    #[default]
    Flat,
    /// Mean over classes of each class's mean IoU.
    PerClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub exact_ratio_pct: f64,
    /// `None` when the fold has no recorded IoU values.
    pub miou_pct: Option<f64>,
    pub episode_count: usize,
    pub failure_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    /// Free-form setting label such as `1-way 1-shot`.
    pub setting: String,
    pub miou_mode: MiouMode,
    pub per_fold: BTreeMap<u8, FoldMetrics>,
    pub average: FoldMetrics,
}

fn mean(v: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn aggregate(scores: &[EpisodeScore], mode: MiouMode) -> Result<MetricsReport, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut by_fold: BTreeMap<u8, Vec<&EpisodeScore>> = BTreeMap::new();
    for s in scores {
        by_fold.entry(s.fold).or_default().push(s);
    }
    let mut per_fold = BTreeMap::new();
    for (fold, group) in by_fold {
        let n = group.len();
        let exact = group.iter().filter(|s| s.exact_match).count();
        let miou = match mode {
            MiouMode::Flat => mean(group.iter().flat_map(|s| s.per_class_iou.values().copied())),
            MiouMode::PerClass => {
                let mut per_class: BTreeMap<ClassId, Vec<f64>> = BTreeMap::new();
                for s in &group {
                    for (&c, &v) in &s.per_class_iou {
                        per_class.entry(c).or_default().push(v);
                    }
                }
                mean(per_class.values().filter_map(|v| mean(v.iter().copied())))
            }
        };
        per_fold.insert(
            fold,
            FoldMetrics {
                exact_ratio_pct: 100.0 * exact as f64 / n as f64,
                miou_pct: miou.map(|m| 100.0 * m),
                episode_count: n,
                failure_count: group.iter().filter(|s| s.failed).count(),
            },
        );
    }
    let average = FoldMetrics {
        exact_ratio_pct: mean(per_fold.values().map(|f| f.exact_ratio_pct)).unwrap_or(0.0),
        miou_pct: mean(per_fold.values().filter_map(|f| f.miou_pct)),
        episode_count: per_fold.values().map(|f| f.episode_count).sum(),
        failure_count: per_fold.values().map(|f| f.failure_count).sum(),
    };
    Ok(MetricsReport { method: "Ours".into(), setting: String::new(), miou_mode: mode, per_fold, average })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    TextTable,
    Json,
    Csv,
}

pub fn render_report(report: &MetricsReport, format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::TextTable => render_table(std::slice::from_ref(report)).into_bytes(),
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s.into_bytes()
        }
        ReportFormat::Csv => render_csv(report).into_bytes(),
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.1}")).unwrap_or_else(|| "-".into())
}

/// One row per report; fold columns are the union of folds across rows.
pub fn render_table(reports: &[MetricsReport]) -> String {
    let folds: Vec<u8> = {
        let mut f: Vec<u8> = reports.iter().flat_map(|r| r.per_fold.keys().copied()).collect();
        f.sort_unstable();
        f.dedup();
        f
    };
    const COL: usize = 7;
    let method_w = reports.iter().map(|r| r.method.len()).max().unwrap_or(0).max("Method".len()) + 2;
    let group_w = (folds.len() + 1) * COL;
    let sep = " | ";
    let mut out = String::new();

    let setting = reports.iter().map(|r| r.setting.as_str()).find(|s| !s.is_empty()).unwrap_or("");
    if !setting.is_empty() {
        let _ = writeln!(out, "{:method_w$}{sep}{:^w$}", "", setting, w = 2 * group_w + sep.len());
    }
    let _ = writeln!(
        out,
        "{:method_w$}{sep}{:<group_w$}{sep}{:<group_w$}",
        "",
        "classification 0/1 exact ratio (%)",
        "segmentation mIoU (%)"
    );
    let mut header = format!("{:method_w$}", "Method");
    for _group in 0..2 {
        header.push_str(sep);
        for f in &folds {
            let _ = write!(header, "{:>COL$}", format!("5^{f}"));
        }
        let _ = write!(header, "{:>COL$}", "avg.");
    }
    let _ = writeln!(out, "{}", header.trim_end());
    let _ = writeln!(out, "{}", "-".repeat(method_w + 2 * (sep.len() + group_w)));
    for r in reports {
        let mut row = format!("{:method_w$}{sep}", r.method);
        for f in &folds {
            let _ = write!(row, "{:>COL$}", cell(r.per_fold.get(f).map(|m| m.exact_ratio_pct)));
        }
        let _ = write!(row, "{:>COL$}{sep}", cell(Some(r.average.exact_ratio_pct)));
        for f in &folds {
            let _ = write!(row, "{:>COL$}", cell(r.per_fold.get(f).and_then(|m| m.miou_pct)));
        }
        let _ = write!(row, "{:>COL$}", cell(r.average.miou_pct));
        let _ = writeln!(out, "{row}");
    }
    out
}

fn render_csv(report: &MetricsReport) -> String {
    let mut s = String::from("method,fold,exact_ratio_pct,miou_pct,episode_count,failure_count\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (fold, m) in &report.per_fold {
        let _ = writeln!(
            s,
            "{},{fold},{},{},{},{}",
            report.method,
            m.exact_ratio_pct,
            opt(m.miou_pct),
            m.episode_count,
            m.failure_count
        );
    }
    let a = &report.average;
    let _ = writeln!(
        s,
        "{},avg,{},{},{},{}",
        report.method,
        a.exact_ratio_pct,
        opt(a.miou_pct),
        a.episode_count,
        a.failure_count
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(w: u32, h: u32, f: impl Fn(u32, u32) -> bool) -> BinaryMask {
        BinaryMask::from_fn(w, h, f)
    }

    #[test]
    fn iou_cases() {
        let a = mask(3, 3, |_, y| y == 0);
        let b = mask(3, 3, |x, _| x == 0);
        assert_eq!(iou(&a, &b).unwrap(), 0.2);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &mask(3, 3, |_, y| y == 2)).unwrap(), 0.0);
        assert_eq!(iou(&BinaryMask::empty(3, 3), &BinaryMask::empty(3, 3)).unwrap(), 1.0);
        assert!(matches!(iou(&a, &BinaryMask::empty(3, 4)), Err(MetricsError::DimensionMismatch(..))));
    }

    fn score(fold: u8, exact: bool, ious: &[(u32, f64)]) -> EpisodeScore {
        EpisodeScore {
            episode_id: format!("e{fold}{exact}{}", ious.len()),
            fold,
            exact_match: exact,
            per_class_iou: ious.iter().map(|&(c, v)| (ClassId(c), v)).collect(),
            failed: false,
        }
    }

    #[test]
    fn exact_ratio_counts() {
        let scores: Vec<_> = [true, true, false, true].iter().map(|&e| score(0, e, &[(1, 1.0)])).collect();
        let r = aggregate(&scores, MiouMode::Flat).unwrap();
        assert_eq!(r.per_fold[&0].exact_ratio_pct, 75.0);
        assert_eq!(r.average.exact_ratio_pct, 75.0);
    }

    #[test]
    fn empty_aggregate_errors() {
        assert_eq!(aggregate(&[], MiouMode::Flat), Err(MetricsError::EmptyInput));
    }

    #[test]
    fn six_score_recount() {
        // fold 0: exact [T, F, T], ious {1:0.5}, {1:0.25, 2:0.0}, {2:1.0}
        // fold 2: exact [T, T, F], ious {11:0.8}, {}, {12:0.1, 11:0.4}
        let scores = vec![
            score(0, true, &[(1, 0.5)]),
            score(0, false, &[(1, 0.25), (2, 0.0)]),
            score(0, true, &[(2, 1.0)]),
            score(2, true, &[(11, 0.8)]),
            score(2, true, &[]),
            score(2, false, &[(12, 0.1), (11, 0.4)]),
        ];
        // independent recount by hand
        let f0_exact = 100.0 * 2.0 / 3.0;
        let f0_flat = 100.0 * (0.5 + 0.25 + 0.0 + 1.0) / 4.0;
        let f2_flat = 100.0 * (0.8 + 0.1 + 0.4) / 3.0;
        let f0_macro = 100.0 * ((0.5 + 0.25) / 2.0 + (0.0 + 1.0) / 2.0) / 2.0;
        let f2_macro = 100.0 * ((0.8 + 0.4) / 2.0 + 0.1) / 2.0;

        let r = aggregate(&scores, MiouMode::Flat).unwrap();
        assert!((r.per_fold[&0].exact_ratio_pct - f0_exact).abs() < 1e-12);
        assert!((r.per_fold[&0].miou_pct.unwrap() - f0_flat).abs() < 1e-12);
        assert!((r.per_fold[&2].miou_pct.unwrap() - f2_flat).abs() < 1e-12);
        assert!((r.average.miou_pct.unwrap() - (f0_flat + f2_flat) / 2.0).abs() < 1e-12);
        assert!((r.average.exact_ratio_pct - (f0_exact + f0_exact) / 2.0).abs() < 1e-12);
        assert_eq!(r.average.episode_count, 6);

        let m = aggregate(&scores, MiouMode::PerClass).unwrap();
        assert!((m.per_fold[&0].miou_pct.unwrap() - f0_macro).abs() < 1e-12);
        assert!((m.per_fold[&2].miou_pct.unwrap() - f2_macro).abs() < 1e-12);
    }

    #[test]
    fn duplicating_scores_is_neutral() {
        let scores = vec![score(1, true, &[(6, 0.3)]), score(1, false, &[(7, 0.9), (6, 0.2)])];
        let doubled: Vec<_> = scores.iter().chain(scores.iter()).cloned().collect();
        let a = aggregate(&scores, MiouMode::Flat).unwrap();
        let b = aggregate(&doubled, MiouMode::Flat).unwrap();
        assert!((a.average.exact_ratio_pct - b.average.exact_ratio_pct).abs() < 1e-12);
        assert!((a.average.miou_pct.unwrap() - b.average.miou_pct.unwrap()).abs() < 1e-12);
    }

    fn report_with(values: &[(u8, f64, f64)]) -> MetricsReport {
        let per_fold: BTreeMap<u8, FoldMetrics> = values
            .iter()
            .map(|&(f, e, m)| {
                (f, FoldMetrics { exact_ratio_pct: e, miou_pct: Some(m), episode_count: 10, failure_count: 0 })
            })
            .collect();
        let n = values.len() as f64;
        MetricsReport {
            method: "Ours".into(),
            setting: "1-way 1-shot".into(),
            miou_mode: MiouMode::Flat,
            average: FoldMetrics {
                exact_ratio_pct: values.iter().map(|v| v.1).sum::<f64>() / n,
                miou_pct: Some(values.iter().map(|v| v.2).sum::<f64>() / n),
                episode_count: 10 * values.len(),
                failure_count: 0,
            },
            per_fold,
        }
    }

    #[test]
    fn json_round_trip() {
        let r = report_with(&[(0, 93.5, 37.3), (1, 80.3, 45.5), (2, 84.4, 34.2), (3, 87.3, 35.6)]);
        let back: MetricsReport = serde_json::from_slice(&render_report(&r, ReportFormat::Json)).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn csv_is_lossless() {
        let r = report_with(&[(0, 100.0 / 3.0, 0.1 + 0.2)]);
        let csv = String::from_utf8(render_report(&r, ReportFormat::Csv)).unwrap();
        let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
        assert_eq!(row[2].parse::<f64>().unwrap(), 100.0 / 3.0);
        assert_eq!(row[3].parse::<f64>().unwrap(), 0.1 + 0.2);
    }

    #[test]
    fn single_fold_table() {
        let r = report_with(&[(2, 70.0, 30.0)]);
        let t = String::from_utf8(render_report(&r, ReportFormat::TextTable)).unwrap();
        let header = t.lines().find(|l| l.starts_with("Method")).unwrap();
        assert_eq!(header.matches("5^").count(), 2);
        assert!(header.contains("5^2"));
        let row = t.lines().last().unwrap();
        assert_eq!(row.matches("70.0").count(), 2);
        assert_eq!(row.matches("30.0").count(), 2);
    }
}
