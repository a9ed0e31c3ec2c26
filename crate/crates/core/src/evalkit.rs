//! Tracking metrics: overlap, success/AUC, long-term precision/recall/F,
//! and per-attribute aggregation.
//!
//! Long-term protocol at confidence threshold `tau`: a prediction survives
//! when its confidence is at least `tau`.
//!
//! ```text
//! Pr(tau) = (1/N_p) * sum over surviving predictions of overlap (0 when the target is absent)
//! Re(tau) = (1/N_g) * sum over visible frames with a surviving prediction of overlap
//! F(tau)  = 2 Pr Re / (Pr + Re)
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::synthdata::Attribute;

/// Number of points in every threshold sweep.
pub const SWEEP_POINTS: usize = 101;

/// `0, 0.01, ..., 1`.
pub fn sweep_thresholds() -> Vec<f64> {
    (0..SWEEP_POINTS).map(|k| k as f64 / (SWEEP_POINTS - 1) as f64).collect()
}

/// Intersection over union; 0 for disjoint or degenerate boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if !(a.w > 0.0 && a.h > 0.0 && b.w > 0.0 && b.h > 0.0) {
        return 0.0;
    }
    // `(x + w) - x` need not round back to `w`; keep identical boxes exact.
    if a == b {
        return 1.0;
    }
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        (inter / union).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

pub fn f_score(pr: f64, re: f64) -> f64 {
    if pr + re > 0.0 {
        2.0 * pr * re / (pr + re)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    /// `None`: the tracker reports the target as not visible.
    pub bbox: Option<BBox>,
    pub confidence: f64,
}

impl Prediction {
    pub fn present(bbox: BBox, confidence: f64) -> Self {
        Self {
            bbox: Some(bbox),
            confidence,
        }
    }

    pub fn absent() -> Self {
        Self {
            bbox: None,
            confidence: 0.0,
        }
    }

    fn survives(&self, tau: f64) -> Option<&BBox> {
        self.bbox.as_ref().filter(|_| self.confidence >= tau)
    }
}

pub type PredictionTrace = Vec<Prediction>;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricCurve {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
    /// AUC for success curves, the peak for F curves.
    pub summary: f64,
}

/// Per-frame overlaps for the short-term protocol: frames where the target
/// is not visible are skipped, a missing prediction scores 0.
pub fn frame_overlaps(trace: &[Prediction], gt: &[Option<BBox>]) -> Result<Vec<f64>> {
    check_aligned(trace, gt)?;
    Ok(trace
        .iter()
        .zip(gt)
        .filter_map(|(p, g)| g.map(|g| p.bbox.map_or(0.0, |b| iou(&b, &g))))
        .collect())
}

/// Fraction of overlaps strictly above each of the 101 thresholds; the AUC
/// is the mean of the curve.
pub fn success_auc(overlaps: &[f64]) -> Result<(MetricCurve, f64)> {
    if overlaps.is_empty() {
        return Err(Error::InvalidArgument("success curve of an empty overlap list".into()));
    }
    let thresholds = sweep_thresholds();
    let n = overlaps.len() as f64;
    let values: Vec<f64> = thresholds
        .iter()
        .map(|&t| overlaps.iter().filter(|&&s| s > t).count() as f64 / n)
        .collect();
    let auc = values.iter().sum::<f64>() / values.len() as f64;
    Ok((
        MetricCurve {
            thresholds,
            values,
            summary: auc,
        },
        auc,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrReF {
    pub precision: MetricCurve,
    pub recall: MetricCurve,
    pub f: MetricCurve,
    /// Threshold of the peak F (lowest on ties).
    pub peak_tau: f64,
    pub peak_f: f64,
    pub peak_precision: f64,
    pub peak_recall: f64,
}

fn check_aligned(trace: &[Prediction], gt: &[Option<BBox>]) -> Result<()> {
    if trace.len() != gt.len() {
        return Err(Error::InvalidArgument(format!(
            "trace has {} frames but the ground truth has {}",
            trace.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// Long-term precision/recall/F over the 101-point confidence sweep.
pub fn pr_re_f(trace: &[Prediction], gt: &[Option<BBox>]) -> Result<PrReF> {
    check_aligned(trace, gt)?;
    let thresholds = sweep_thresholds();
    let n_g = gt.iter().filter(|g| g.is_some()).count();
    let (mut pr, mut re, mut f) = (Vec::new(), Vec::new(), Vec::new());
    for &tau in &thresholds {
        let (mut n_p, mut sum_p, mut sum_g) = (0usize, 0.0, 0.0);
        for (p, g) in trace.iter().zip(gt) {
            let Some(b) = p.survives(tau) else { continue };
            n_p += 1;
            if let Some(g) = g {
                let o = iou(b, g);
                sum_p += o;
                sum_g += o;
            }
        }
        let p = if n_p > 0 { sum_p / n_p as f64 } else { 0.0 };
        let r = if n_g > 0 { sum_g / n_g as f64 } else { 0.0 };
        pr.push(p);
        re.push(r);
        f.push(f_score(p, r));
    }
    let mut best = 0;
    for (i, &v) in f.iter().enumerate() {
        if v > f[best] {
            best = i;
        }
    }
    let curve = |values: Vec<f64>, summary: f64| MetricCurve {
        thresholds: thresholds.clone(),
        values,
        summary,
    };
    Ok(PrReF {
        peak_tau: thresholds[best],
        peak_f: f[best],
        peak_precision: pr[best],
        peak_recall: re[best],
        precision: curve(pr.clone(), pr[best]),
        recall: curve(re.clone(), re[best]),
        f: curve(f.clone(), f[best]),
    })
}

/// Score of one evaluated sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceScore {
    pub name: String,
    pub tags: Vec<String>,
    pub value: f64,
}

/// Mean score per attribute tag, sorted by tag. Tags without sequences do
/// not appear.
pub fn attribute_report(scores: &[SequenceScore]) -> Result<Vec<(String, f64)>> {
    let mut groups: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for s in scores {
        for tag in &s.tags {
            let tag: Attribute = tag.parse().map_err(|_| {
                Error::InvalidArgument(format!("sequence `{}` has unknown attribute tag `{tag}`", s.name))
            })?;
            let e = groups.entry(tag.to_string()).or_insert((0.0, 0));
            e.0 += s.value;
            e.1 += 1;
        }
    }
    Ok(groups.into_iter().map(|(k, (sum, n))| (k, sum / n as f64)).collect())
}

/// `metric,tag,value` lines.
pub fn format_report(metric: &str, rows: &[(String, f64)]) -> String {
    let mut s = String::new();
    for (tag, v) in rows {
        let _ = writeln!(s, "{metric},{tag},{v}");
    }
    s
}

/// `tau,pr,re,f` lines with a header.
pub fn format_curve(m: &PrReF) -> String {
    let mut s = String::from("tau,pr,re,f\n");
    for i in 0..m.f.thresholds.len() {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            m.f.thresholds[i], m.precision.values[i], m.recall.values[i], m.f.values[i]
        );
    }
    s
}

/// One `x,y,w,h,conf` or `absent` line per frame.
pub fn format_predictions(trace: &[Prediction]) -> String {
    let mut s = String::new();
    for p in trace {
        match p.bbox {
            Some(b) => {
                let _ = writeln!(s, "{},{},{},{},{}", b.x, b.y, b.w, b.h, p.confidence);
            }
            None => s.push_str("absent\n"),
        }
    }
    s
}

pub fn parse_predictions(text: &str, path: &str) -> Result<PredictionTrace> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let err = |message: String| Error::Parse {
                path: path.to_string(),
                line: n + 1,
                message,
            };
            let line = line.trim();
            if line == "absent" {
                return Ok(Prediction::absent());
            }
            let v = line
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| err(format!("bad number: {e}")))?;
            let [x, y, w, h, c] = v[..] else {
                return Err(err(format!("expected `x,y,w,h,conf` or `absent`, got {} fields", v.len())));
            };
            if !(0.0..=1.0).contains(&c) {
                return Err(err(format!("confidence {c} outside [0, 1]")));
            }
            if !(w >= 0.0 && h >= 0.0) || ![x, y].iter().all(|v| v.is_finite()) {
                return Err(err("box must be finite with non-negative size".into()));
            }
            Ok(Prediction::present(BBox::new(x, y, w, h), c))
        })
        .collect()
}

pub fn read_predictions(path: &Path) -> Result<PredictionTrace> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_predictions(&text, &path.display().to_string())
}
