//! Hard-mask evaluation: per-class DSC, Average DSC over RV/MYO/LV, the End
//! Coefficient (EC) and Hausdorff distance.

mod distance;
mod report;

pub use distance::{directed_hausdorff, hausdorff};
pub use report::{read_metrics_csv, report_rows, write_metrics_csv, MetricRow, AGGREGATE_ID, CSV_COLUMNS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{check_same_shape, Class, LabelMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// EC counts a frame when its end-slice Average DSC is strictly above this.
    pub ec_threshold: f64,
    /// Slices taken from each end of a frame.
    pub end_slice_count: usize,
    /// Depth distance between slices, in pixels, for Hausdorff distance.
    pub slice_spacing: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { ec_threshold: 0.8, end_slice_count: 2, slice_spacing: 1.0 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ec_threshold > 0.0 && self.ec_threshold < 1.0) {
            return Err(Error::config(format!("ec_threshold {} outside (0, 1)", self.ec_threshold)));
        }
        if self.end_slice_count == 0 {
            return Err(Error::config("end_slice_count must be at least 1"));
        }
        if !(self.slice_spacing > 0.0 && self.slice_spacing.is_finite()) {
            return Err(Error::config("slice_spacing must be positive"));
        }
        Ok(())
    }
}

/// `2|A∩B| / (|A|+|B|)` over voxels labelled `class`; 1.0 when both are empty.
pub fn hard_dsc(pred: &LabelMask, truth: &LabelMask, class: Class) -> Result<f64> {
    check_same_shape(pred.shape(), truth.shape(), "dsc prediction/truth")?;
    let c = class as u8;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        inter += usize::from(p == c && t == c);
        total += usize::from(p == c) + usize::from(t == c);
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Mean of [`hard_dsc`] over RV, MYO and LV.
pub fn average_dsc(pred: &LabelMask, truth: &LabelMask) -> Result<f64> {
    let mut sum = 0.0;
    for c in Class::FOREGROUND {
        sum += hard_dsc(pred, truth, c)?;
    }
    Ok(sum / Class::FOREGROUND.len() as f64)
}

/// The first and last `count` slice indices of a depth-`depth` frame,
/// ascending and without repeats.
pub fn end_slices(depth: usize, count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..count.min(depth)).chain(depth.saturating_sub(count)..depth).collect();
    idx.sort_unstable();
    idx.dedup();
    idx
}

/// Average DSC restricted to the end slices.
pub fn end_slice_dsc(pred: &LabelMask, truth: &LabelMask, cfg: &EvalConfig) -> Result<f64> {
    check_same_shape(pred.shape(), truth.shape(), "end-slice prediction/truth")?;
    let idx = end_slices(pred.shape().depth, cfg.end_slice_count);
    average_dsc(&pred.select_slices(&idx), &truth.select_slices(&idx))
}

/// Fraction of frames whose end-slice Average DSC exceeds the threshold.
pub fn end_coefficient(frames: &[(LabelMask, LabelMask)], cfg: &EvalConfig) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::Data("end coefficient of an empty frame list".into()));
    }
    let mut pass = 0usize;
    for (p, t) in frames {
        pass += usize::from(end_slice_dsc(p, t, cfg)? > cfg.ec_threshold);
    }
    Ok(pass as f64 / frames.len() as f64)
}

/// Metrics of one frame.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRecord {
    pub frame_id: String,
    /// RV, MYO, LV.
    pub dsc: [f64; 3],
    pub average_dsc: f64,
    /// RV, MYO, LV in pixels; `None` when exactly one mask lacks the class.
    pub hd: [Option<f64>; 3],
    pub end_slice_avg_dsc: f64,
    pub ec_pass: bool,
}

impl MetricRecord {
    /// Mean of the defined per-class distances.
    pub fn hd_average(&self) -> Option<f64> {
        let defined: Vec<f64> = self.hd.iter().flatten().copied().collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }

    pub fn hd_undefined(&self) -> usize {
        self.hd.iter().filter(|h| h.is_none()).count()
    }
}

pub fn evaluate_frame(frame_id: &str, pred: &LabelMask, truth: &LabelMask, cfg: &EvalConfig) -> Result<MetricRecord> {
    let mut dsc = [0.0; 3];
    let mut hd = [None; 3];
    for (k, c) in Class::FOREGROUND.into_iter().enumerate() {
        dsc[k] = hard_dsc(pred, truth, c)?;
        hd[k] = hausdorff(pred, truth, c, cfg.slice_spacing)?;
    }
    let end = end_slice_dsc(pred, truth, cfg)?;
    Ok(MetricRecord {
        frame_id: frame_id.to_string(),
        dsc,
        average_dsc: dsc.iter().sum::<f64>() / 3.0,
        hd,
        end_slice_avg_dsc: end,
        ec_pass: end > cfg.ec_threshold,
    })
}

/// Set-level summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub frames: usize,
    pub dsc: [f64; 3],
    pub average_dsc: f64,
    /// Mean over frames where the class distance is defined.
    pub hd: [Option<f64>; 3],
    pub hd_average: Option<f64>,
    pub end_slice_avg_dsc: f64,
    pub ec: f64,
    pub hd_undefined: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub records: Vec<MetricRecord>,
    pub aggregate: Aggregate,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// One record per `(frame_id, prediction, truth)` plus the aggregate row.
pub fn evaluate_testset(frames: &[(String, LabelMask, LabelMask)], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(Error::Data("no frames to evaluate".into()));
    }
    let records =
        frames.iter().map(|(id, p, t)| evaluate_frame(id, p, t, cfg)).collect::<Result<Vec<MetricRecord>>>()?;
    let k = records.len() as f64;
    let mut dsc = [0.0; 3];
    let mut hd = [None; 3];
    for c in 0..3 {
        dsc[c] = records.iter().map(|r| r.dsc[c]).sum::<f64>() / k;
        hd[c] = mean(records.iter().filter_map(|r| r.hd[c]));
    }
    let aggregate = Aggregate {
        frames: records.len(),
        dsc,
        average_dsc: records.iter().map(|r| r.average_dsc).sum::<f64>() / k,
        hd,
        hd_average: mean(records.iter().filter_map(MetricRecord::hd_average)),
        end_slice_avg_dsc: records.iter().map(|r| r.end_slice_avg_dsc).sum::<f64>() / k,
        ec: records.iter().filter(|r| r.ec_pass).count() as f64 / k,
        hd_undefined: records.iter().map(MetricRecord::hd_undefined).sum(),
    };
    Ok(EvalReport { records, aggregate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Shape3;
    use proptest::prelude::*;

    fn mask_with(shape: Shape3, cells: &[(usize, usize, usize, Class)]) -> LabelMask {
        let mut m = LabelMask::zeros(shape);
        for &(d, y, x, c) in cells {
            m.set(d, y, x, c);
        }
        m
    }

    #[test]
    fn dsc_hand_cases() {
        let s = Shape3::new(1, 8, 8);
        let a = mask_with(s, &[(0, 0, 0, Class::Lv), (0, 0, 1, Class::Lv), (0, 0, 2, Class::Lv), (0, 0, 3, Class::Lv)]);
        let b = mask_with(s, &[(0, 0, 2, Class::Lv), (0, 0, 3, Class::Lv), (0, 0, 4, Class::Lv), (0, 0, 5, Class::Lv)]);
        assert_eq!(hard_dsc(&a, &b, Class::Lv).unwrap(), 0.5);
        assert_eq!(hard_dsc(&a, &a, Class::Lv).unwrap(), 1.0);
        let c = mask_with(s, &[(0, 5, 0, Class::Lv), (0, 5, 1, Class::Lv), (0, 5, 2, Class::Lv), (0, 5, 3, Class::Lv)]);
        assert_eq!(hard_dsc(&a, &c, Class::Lv).unwrap(), 0.0);
        // both empty
        assert_eq!(hard_dsc(&a, &b, Class::Rv).unwrap(), 1.0);
        assert_eq!(average_dsc(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn average_of_known_scores() {
        // RV 1/1 overlap, MYO 2 of 4, LV disjoint
        let s = Shape3::new(1, 4, 4);
        let p = mask_with(s, &[(0, 0, 0, Class::Rv), (0, 1, 0, Class::Myo), (0, 1, 1, Class::Myo), (0, 3, 3, Class::Lv)]);
        let t = mask_with(s, &[(0, 0, 0, Class::Rv), (0, 1, 0, Class::Myo), (0, 2, 2, Class::Myo), (0, 3, 2, Class::Lv)]);
        assert!((average_dsc(&p, &t).unwrap() - (1.0 + 0.5 + 0.0) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn end_slice_sets() {
        assert_eq!(end_slices(10, 2), vec![0, 1, 8, 9]);
        assert_eq!(end_slices(3, 2), vec![0, 1, 2]);
        assert_eq!(end_slices(1, 2), vec![0]);
        assert_eq!(end_slices(6, 1), vec![0, 5]);
    }

    #[test]
    fn ec_indicator_average() {
        // end-slice scores 1.0 and 0.0 -> EC 0.5
        let s = Shape3::new(4, 2, 2);
        let t = mask_with(s, &[(0, 0, 0, Class::Rv), (0, 0, 1, Class::Myo), (0, 1, 0, Class::Lv)]);
        let frames = vec![(t.clone(), t.clone()), (LabelMask::zeros(s), t.clone())];
        assert_eq!(end_coefficient(&frames, &EvalConfig::default()).unwrap(), 0.5);
        assert!(end_coefficient(&[], &EvalConfig::default()).is_err());
    }

    #[test]
    fn ec_threshold_is_strict() {
        // RV perfect, MYO perfect, LV 0.4 -> average 0.8, not above 0.8
        let s = Shape3::new(1, 1, 8);
        let t = mask_with(s, &[(0, 0, 0, Class::Rv), (0, 0, 1, Class::Myo), (0, 0, 2, Class::Lv), (0, 0, 3, Class::Lv), (0, 0, 4, Class::Lv), (0, 0, 5, Class::Lv), (0, 0, 6, Class::Lv)]);
        let p = mask_with(s, &[(0, 0, 0, Class::Rv), (0, 0, 1, Class::Myo), (0, 0, 2, Class::Lv)]);
        let score = end_slice_dsc(&p, &t, &EvalConfig::default()).unwrap();
        assert!((score - (2.0 + 2.0 / 6.0) / 3.0).abs() < 1e-15);
        let cfg = EvalConfig { ec_threshold: score, ..EvalConfig::default() };
        assert_eq!(end_coefficient(&[(p, t)], &cfg).unwrap(), 0.0);
    }

    #[test]
    fn perfect_frame_report() {
        let s = Shape3::new(4, 4, 4);
        let t = mask_with(s, &[(1, 1, 1, Class::Rv), (2, 2, 2, Class::Myo), (3, 0, 0, Class::Lv)]);
        let rep = evaluate_testset(&[("f".into(), t.clone(), t)], &EvalConfig::default()).unwrap();
        let a = &rep.aggregate;
        assert_eq!(a.dsc, [1.0; 3]);
        assert_eq!(a.hd, [Some(0.0); 3]);
        assert_eq!(a.ec, 1.0);
        assert_eq!(a.hd_undefined, 0);
    }

    #[test]
    fn aggregate_is_mean_of_frames() {
        let s = Shape3::new(2, 4, 4);
        let t = mask_with(s, &[(0, 1, 1, Class::Rv), (1, 1, 1, Class::Rv), (0, 2, 2, Class::Lv)]);
        let p = mask_with(s, &[(0, 1, 1, Class::Rv), (0, 3, 3, Class::Lv)]);
        let rep = evaluate_testset(&[("a".into(), p.clone(), t.clone()), ("b".into(), t.clone(), t)], &EvalConfig::default()).unwrap();
        for c in 0..3 {
            let m = (rep.records[0].dsc[c] + rep.records[1].dsc[c]) / 2.0;
            assert_eq!(rep.aggregate.dsc[c], m);
        }
        // MYO absent in both masks: distance 0, not undefined
        assert_eq!(rep.records[0].hd[1], Some(0.0));
    }

    fn random_mask() -> impl Strategy<Value = LabelMask> {
        prop::collection::vec(0u8..4, 64).prop_map(|l| LabelMask::new(Shape3::new(1, 8, 8), l).unwrap())
    }

    proptest! {
        #[test]
        fn dsc_symmetric(a in random_mask(), b in random_mask()) {
            for c in Class::ALL {
                prop_assert_eq!(hard_dsc(&a, &b, c).unwrap(), hard_dsc(&b, &a, c).unwrap());
                let d = hard_dsc(&a, &b, c).unwrap();
                prop_assert!((0.0..=1.0).contains(&d));
            }
        }

        #[test]
        fn ec_monotone_in_threshold(masks in prop::collection::vec((random_mask(), random_mask()), 1..6), t1 in 0.01f64..0.99, t2 in 0.01f64..0.99) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let at = |t| end_coefficient(&masks, &EvalConfig { ec_threshold: t, ..EvalConfig::default() }).unwrap();
            prop_assert!(at(hi) <= at(lo));
            let k = masks.len() as f64;
            let ec = at(lo);
            prop_assert_eq!((ec * k).round() / k, ec);
        }
    }
}
