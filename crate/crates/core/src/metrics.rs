//! Evaluation arithmetic: area-ratio IoU against a reference area, detection
//! confusion counts and the derived scores.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segment::Region;

pub const DEFAULT_MATCH_RADIUS_PX: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMethod {
    #[default]
    Median,
    FirstQuartile,
}

/// Median (mean of the middle pair for even `n`) or first quartile
/// (linear interpolation at rank `(n + 1) / 4`).
pub fn reference_area(areas: &[f64], method: ReferenceMethod) -> Result<f64> {
    if areas.is_empty() {
        return Err(Error::EmptyList);
    }
    let mut sorted = areas.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    Ok(match method {
        ReferenceMethod::Median => {
            if n % 2 == 1 {
                sorted[n / 2]
            } else {
                0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
            }
        }
        ReferenceMethod::FirstQuartile => {
            let rank = (n as f64 + 1.0) / 4.0;
            if rank <= 1.0 {
                sorted[0]
            } else if rank >= n as f64 {
                sorted[n - 1]
            } else {
                let lo = rank.floor() as usize;
                let frac = rank - lo as f64;
                sorted[lo - 1] + frac * (sorted[lo] - sorted[lo - 1])
            }
        }
    })
}

/// `min(a, b) / max(a, b)`.
pub fn area_ratio_iou(mask_area: f64, reference_area: f64) -> Result<f64> {
    if !(mask_area > 0.0) {
        return Err(Error::NonPositive("mask area"));
    }
    if !(reference_area > 0.0) {
        return Err(Error::NonPositive("reference area"));
    }
    Ok(mask_area.min(reference_area) / mask_area.max(reference_area))
}

/// Mask area as a percentage of the reference area.
pub fn roi_percentage(mask_area: f64, reference_area: f64) -> Result<f64> {
    if !(reference_area > 0.0) {
        return Err(Error::NonPositive("reference area"));
    }
    Ok(100.0 * mask_area / reference_area)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaSeries {
    pub particle_name: String,
    pub mask_area_px: u64,
    pub condition_areas_px: Vec<u64>,
    pub reference_method: ReferenceMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaEvaluation {
    pub particle_name: String,
    pub mask_area_px: u64,
    pub reference_area_px: f64,
    pub reference_method: ReferenceMethod,
    pub iou: f64,
    pub roi_percent: f64,
}

impl AreaSeries {
    pub fn evaluate(&self) -> Result<AreaEvaluation> {
        if self.condition_areas_px.iter().any(|&a| a == 0) || self.mask_area_px == 0 {
            return Err(Error::NonPositive("area"));
        }
        let areas: Vec<f64> = self.condition_areas_px.iter().map(|&a| a as f64).collect();
        let reference = reference_area(&areas, self.reference_method)?;
        let mask = self.mask_area_px as f64;
        Ok(AreaEvaluation {
            particle_name: self.particle_name.clone(),
            mask_area_px: self.mask_area_px,
            reference_area_px: reference,
            reference_method: self.reference_method,
            iou: area_ratio_iou(mask, reference)?,
            roi_percent: roi_percentage(mask, reference)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        Self { tp, fp, tn, fn_ }
    }
}

/// Scores are `None` where their denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub iou: Option<f64>,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn scores(c: &ConfusionCounts) -> Scores {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    Scores {
        iou: ratio(c.tp, c.tp + c.fn_ + c.fp),
        accuracy: ratio(c.tp + c.tn, c.tp + c.tn + c.fp + c.fn_),
        precision,
        recall,
        f1,
    }
}

/// A detected or ground-truth particle. `label = None` marks a non-plastic particle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub centroid: (f64, f64),
    pub label: Option<String>,
}

impl Detection {
    pub fn from_region(region: &Region, label: Option<String>) -> Self {
        Self {
            centroid: region.centroid,
            label,
        }
    }
}

/// Greedy nearest-first centroid matching within `match_radius_px`.
///
/// Matched pairs: same plastic label is TP, both non-plastic is TN, a miss on
/// a plastic (predicted non-plastic) is FN, any other disagreement is FP.
/// Unmatched truth plastics are FN; unmatched predicted plastics are FP.
pub fn detection_confusion(predicted: &[Detection], truth: &[Detection], match_radius_px: f64) -> ConfusionCounts {
    let mut pairs = Vec::new();
    for (i, p) in predicted.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            let d = (p.centroid.0 - t.centroid.0).hypot(p.centroid.1 - t.centroid.1);
            if d <= match_radius_px {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut pred_used = vec![false; predicted.len()];
    let mut truth_used = vec![false; truth.len()];
    let mut c = ConfusionCounts::default();
    for (_, i, j) in pairs {
        if pred_used[i] || truth_used[j] {
            continue;
        }
        pred_used[i] = true;
        truth_used[j] = true;
        match (&predicted[i].label, &truth[j].label) {
            (Some(p), Some(t)) if p == t => c.tp += 1,
            (None, None) => c.tn += 1,
            (None, Some(_)) => c.fn_ += 1,
            _ => c.fp += 1,
        }
    }
    for (t, used) in truth.iter().zip(&truth_used) {
        if !used && t.label.is_some() {
            c.fn_ += 1;
        }
    }
    for (p, used) in predicted.iter().zip(&pred_used) {
        if !used && p.label.is_some() {
            c.fp += 1;
        }
    }
    c
}

/// Number of regions with `area_px >= t` for each threshold.
pub fn size_category_counts(regions: &[Region], thresholds_px2: &[u32]) -> Result<BTreeMap<u32, usize>> {
    if thresholds_px2.iter().any(|&t| t == 0) || thresholds_px2.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::BadThresholds);
    }
    Ok(thresholds_px2
        .iter()
        .map(|&t| (t, regions.iter().filter(|r| r.area_px >= t).count()))
        .collect())
}

/// Per-particle table in the area-evaluation layout followed by the mean IoU.
pub fn write_area_table<W: std::io::Write>(rows: &[AreaEvaluation], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::parse("area table", e);
    wtr.write_record(["particle", "mask_area_px", "reference_area_px", "reference", "iou", "roi_percent"])
        .map_err(err)?;
    for r in rows {
        wtr.write_record([
            r.particle_name.clone(),
            r.mask_area_px.to_string(),
            format!("{:.2}", r.reference_area_px),
            match r.reference_method {
                ReferenceMethod::Median => "median".to_string(),
                ReferenceMethod::FirstQuartile => "q1".to_string(),
            },
            format!("{:.3}", r.iou),
            format!("{:.1}", r.roi_percent),
        ])
        .map_err(err)?;
    }
    if !rows.is_empty() {
        let mean = rows.iter().map(|r| r.iou).sum::<f64>() / rows.len() as f64;
        wtr.write_record(["mean", "", "", "", &format!("{mean:.3}"), ""]).map_err(err)?;
    }
    wtr.flush().map_err(|e| Error::parse("area table", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn quartile_and_median() {
        assert_eq!(reference_area(&[3.0, 1.0, 2.0], ReferenceMethod::Median).unwrap(), 2.0);
        assert_eq!(reference_area(&[4.0, 1.0, 2.0, 3.0], ReferenceMethod::Median).unwrap(), 2.5);
        // rank (8+1)/4 = 2.25 -> 2 + 0.25·(3 - 2)
        let q = reference_area(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], ReferenceMethod::FirstQuartile).unwrap();
        assert_abs_diff_eq!(q, 2.25, epsilon = 1e-12);
        for m in [ReferenceMethod::Median, ReferenceMethod::FirstQuartile] {
            assert_eq!(reference_area(&[7.0; 5], m).unwrap(), 7.0);
            assert_eq!(reference_area(&[7.0], m).unwrap(), 7.0);
        }
        assert!(reference_area(&[], ReferenceMethod::Median).is_err());
    }

    #[test]
    fn area_ratio() {
        assert_abs_diff_eq!(area_ratio_iou(116110.0, 116190.0).unwrap(), 0.999, epsilon = 5e-4);
        assert_abs_diff_eq!(area_ratio_iou(16576.0, 35477.5).unwrap(), 0.467, epsilon = 5e-4);
        assert_eq!(area_ratio_iou(5.0, 5.0).unwrap(), 1.0);
        assert!(area_ratio_iou(0.0, 5.0).is_err());
        assert!(roi_percentage(1.0, 0.0).is_err());
        assert_abs_diff_eq!(roi_percentage(183170.0, 233120.0).unwrap(), 78.6, epsilon = 0.05);
    }

    #[test]
    fn score_examples() {
        let s = scores(&ConfusionCounts::new(9, 1, 0, 0));
        assert_abs_diff_eq!(s.precision.unwrap(), 0.9, epsilon = 1e-12);
        assert_abs_diff_eq!(s.recall.unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.f1.unwrap(), 18.0 / 19.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.accuracy.unwrap(), 0.9, epsilon = 1e-12);
        assert_abs_diff_eq!(s.iou.unwrap(), 0.9, epsilon = 1e-12);

        let s = scores(&ConfusionCounts::new(0, 0, 0, 5));
        assert_eq!(s.recall, Some(0.0));
        assert_eq!(s.precision, None);
        assert_eq!(s.f1, None);

        let s = scores(&ConfusionCounts::new(1, 1, 1, 1));
        for v in [s.accuracy, s.precision, s.recall, s.f1] {
            assert_eq!(v, Some(0.5));
        }
        assert_eq!(scores(&ConfusionCounts::default()).accuracy, None);
    }

    fn det(x: f64, label: Option<&str>) -> Detection {
        Detection { centroid: (x, 0.0), label: label.map(str::to_string) }
    }

    #[test]
    fn confusion_matching() {
        let names = ["PP", "HDPE", "LDPE", "EPS", "PS", "ABS", "PC", "PVC", "PET", "PA"];
        let truth: Vec<_> = names.iter().enumerate().map(|(i, n)| det(i as f64 * 200.0, Some(n))).collect();
        assert_eq!(detection_confusion(&truth, &truth, 50.0), ConfusionCounts::new(10, 0, 0, 0));

        let mut pred = truth.clone();
        pred[3].label = Some("PS".into());
        pred.iter_mut().for_each(|p| p.centroid.0 += 3.0);
        assert_eq!(detection_confusion(&pred, &truth, 50.0), ConfusionCounts::new(9, 1, 0, 0));

        let three: Vec<_> = (0..3).map(|i| det(i as f64 * 100.0, Some("PP"))).collect();
        assert_eq!(detection_confusion(&[], &three, 50.0), ConfusionCounts::new(0, 0, 0, 3));

        let nom = [det(0.0, None)];
        assert_eq!(detection_confusion(&nom, &nom, 50.0), ConfusionCounts::new(0, 0, 1, 0));
        assert_eq!(detection_confusion(&[det(0.0, Some("PP"))], &nom, 50.0).fp, 1);
        assert_eq!(detection_confusion(&[det(900.0, Some("PP"))], &[det(0.0, Some("PP"))], 50.0), ConfusionCounts::new(0, 1, 0, 1));
    }

    #[test]
    fn greedy_match_prefers_nearest() {
        let truth = [det(0.0, Some("A")), det(10.0, Some("B"))];
        let pred = [det(9.0, Some("B")), det(2.0, Some("A"))];
        assert_eq!(detection_confusion(&pred, &truth, 50.0), ConfusionCounts::new(2, 0, 0, 0));
    }

    #[test]
    fn size_categories() {
        let regions: Vec<Region> = [5u32, 15, 60, 120]
            .iter()
            .enumerate()
            .map(|(i, &a)| Region {
                id: i as u32 + 1,
                area_px: a,
                centroid: (0.0, 0.0),
                bbox: (0, 0, 0, 0),
                minor_axis_px: 0.0,
                major_axis_px: 0.0,
                pixel_list: vec![],
            })
            .collect();
        let c = size_category_counts(&regions, &[10, 50, 100]).unwrap();
        assert_eq!(c.into_iter().collect::<Vec<_>>(), vec![(10, 3), (50, 2), (100, 1)]);
        let c = size_category_counts(&[], &[10, 50, 100]).unwrap();
        assert!(c.values().all(|&n| n == 0));
        assert!(size_category_counts(&regions, &[50, 10]).is_err());
        assert!(size_category_counts(&regions, &[0, 10]).is_err());
    }
}
