//! Size-normalised landmark errors, medians and cumulative error curves.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pdm::LandmarkSet;

/// What a landmark error is divided by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    /// Ground-truth distance between the two eye-corner landmarks.
    Iod,
    /// Mean of ground-truth bounding box width and height.
    Size,
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormMode::Iod => "iod",
            NormMode::Size => "size",
        })
    }
}

impl FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "iod" => Ok(NormMode::Iod),
            "size" | "face_size" | "face-size" => Ok(NormMode::Size),
            other => Err(Error::invalid("mode", format!("expected iod or size, got {other:?}"))),
        }
    }
}

/// Mean distance over landmarks visible in both sets, divided by the
/// normaliser selected by `mode`. Iod mode needs the eye-corner indices.
pub fn normalized_error(
    pred: &LandmarkSet,
    truth: &LandmarkSet,
    mode: NormMode,
    eye_corners: Option<[usize; 2]>,
) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension { what: "landmark count", expected: truth.len(), actual: pred.len() });
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..truth.len() {
        if pred.visibility[i] && truth.visibility[i] {
            let (p, t) = (pred.points[i], truth.points[i]);
            sum += (p[0] - t[0]).hypot(p[1] - t[1]);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("landmarks", "no commonly visible landmark"));
    }
    let norm = match mode {
        NormMode::Iod => {
            let [a, b] = eye_corners.ok_or_else(|| Error::invalid("mode", "iod needs eye-corner landmark indices"))?;
            if a >= truth.len() || b >= truth.len() {
                return Err(Error::invalid(
                    "eye_corners",
                    format!("[{a}, {b}] out of range for {} landmarks", truth.len()),
                ));
            }
            let (p, q) = (truth.points[a], truth.points[b]);
            (p[0] - q[0]).hypot(p[1] - q[1])
        }
        NormMode::Size => {
            let bb = truth.visible_bbox().ok_or_else(|| Error::invalid("truth", "no visible landmark"))?;
            0.5 * (bb.width + bb.height)
        }
    };
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::invalid("normalizer", format!("{mode} normaliser is {norm}")));
    }
    Ok(sum / count as f64 / norm)
}

/// Empirical median; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("errors", "empty list"));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("errors", "contains NaN"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    Ok(if v.len() % 2 == 1 { v[k] } else { 0.5 * (v[k - 1] + v[k]) })
}

/// Fraction of errors at or below each threshold.
pub fn cumulative_curve(errors: &[f64], thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    if errors.is_empty() {
        return Err(Error::invalid("errors", "empty list"));
    }
    if thresholds.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::invalid("thresholds", "must be sorted ascending"));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    Ok(thresholds.iter().map(|&t| (t, sorted.partition_point(|&e| e <= t) as f64 / n)).collect())
}

/// `count + 1` evenly spaced thresholds from 0 to `max`.
pub fn linear_thresholds(max: f64, count: usize) -> Vec<f64> {
    (0..=count).map(|i| max * i as f64 / count.max(1) as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub mode: NormMode,
    pub count: usize,
    pub median: f64,
    pub per_image_errors: Vec<f64>,
    pub curve: Vec<(f64, f64)>,
}

impl ErrorReport {
    pub fn new(per_image_errors: Vec<f64>, thresholds: &[f64], mode: NormMode) -> Result<Self> {
        let median = median(&per_image_errors)?;
        let curve = cumulative_curve(&per_image_errors, thresholds)?;
        Ok(Self { mode, count: per_image_errors.len(), median, per_image_errors, curve })
    }

    pub fn curve_csv(&self) -> String {
        let mut out = String::from("threshold,fraction\n");
        for (t, f) in &self.curve {
            let _ = writeln!(out, "{t},{f}");
        }
        out
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "version": 1,
            "mode": self.mode,
            "count": self.count,
            "median": self.median,
            "per_image_errors": self.per_image_errors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(points: Vec<[f64; 2]>) -> LandmarkSet {
        LandmarkSet::all_visible(points)
    }

    #[test]
    fn identical_sets_have_zero_error() {
        let t = set(vec![[0.0, 0.0], [40.0, 0.0], [20.0, 30.0]]);
        assert_eq!(normalized_error(&t, &t, NormMode::Iod, Some([0, 1])).unwrap(), 0.0);
    }

    #[test]
    fn uniform_shift_over_iod() {
        let t = set(vec![[0.0, 0.0], [40.0, 0.0], [20.0, 30.0]]);
        let p = set(t.points.iter().map(|q| [q[0] + 2.0, q[1]]).collect());
        assert!((normalized_error(&p, &t, NormMode::Iod, Some([0, 1])).unwrap() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn size_mode_uses_truth_bbox() {
        let t = set(vec![[0.0, 0.0], [40.0, 0.0], [20.0, 60.0]]);
        let p = set(t.points.iter().map(|q| [q[0], q[1] + 5.0]).collect());
        assert!((normalized_error(&p, &t, NormMode::Size, None).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn only_common_visible_landmarks_count() {
        let t = LandmarkSet::new(vec![[0.0, 0.0], [10.0, 0.0], [5.0, 5.0]], vec![true, true, false]).unwrap();
        let p = LandmarkSet::new(vec![[0.0, 0.0], [10.0, 1.0], [500.0, 5.0]], vec![true, true, true]).unwrap();
        assert!((normalized_error(&p, &t, NormMode::Iod, Some([0, 1])).unwrap() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn error_cases() {
        let t = set(vec![[0.0, 0.0], [0.0, 0.0]]);
        let p = set(vec![[1.0, 0.0], [0.0, 0.0]]);
        assert!(normalized_error(&p, &t, NormMode::Iod, Some([0, 1])).is_err());
        assert!(normalized_error(&p, &t, NormMode::Iod, None).is_err());
        let short = set(vec![[0.0, 0.0]]);
        assert!(matches!(normalized_error(&short, &t, NormMode::Size, None), Err(Error::Dimension { .. })));
        let hidden = LandmarkSet::new(vec![[0.0, 0.0], [3.0, 0.0]], vec![false, false]).unwrap();
        assert!(normalized_error(&hidden, &t, NormMode::Size, None).is_err());
    }

    #[test]
    fn curve_counting() {
        let c = cumulative_curve(&[1.0, 2.0, 3.0], &[1.5, 2.5]).unwrap();
        assert_eq!(c, vec![(1.5, 1.0 / 3.0), (2.5, 2.0 / 3.0)]);
        let zeros = cumulative_curve(&[0.0; 4], &[0.1, 0.2]).unwrap();
        assert!(zeros.iter().all(|&(_, f)| f == 1.0));
        assert!(cumulative_curve(&[], &[0.1]).is_err());
        assert!(cumulative_curve(&[0.1], &[0.2, 0.1]).is_err());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]).unwrap(), 2.5);
        assert!(median(&[]).is_err());
    }

    #[test]
    fn report_serialises() {
        let r = ErrorReport::new(vec![0.01, 0.03, 0.02], &linear_thresholds(0.04, 4), NormMode::Iod).unwrap();
        assert_eq!(r.median, 0.02);
        assert!(r.curve_csv().starts_with("threshold,fraction\n0,0\n"));
        assert_eq!(r.summary_json()["mode"], "iod");
        assert_eq!("size".parse::<NormMode>().unwrap(), NormMode::Size);
        assert!("mean".parse::<NormMode>().is_err());
    }

    proptest! {
        #[test]
        fn curve_is_monotone_and_reaches_one(errors in prop::collection::vec(0.0f64..1.0, 1..50)) {
            let max = errors.iter().cloned().fold(0.0, f64::max);
            let mut th = linear_thresholds(max * 0.9, 9);
            th.push(max);
            let c = cumulative_curve(&errors, &th).unwrap();
            prop_assert!(c.windows(2).all(|w| w[0].1 <= w[1].1));
            prop_assert!(c.iter().all(|&(_, f)| (0.0..=1.0).contains(&f)));
            prop_assert_eq!(c.last().unwrap().1, 1.0);
        }

        #[test]
        fn similarity_invariance_in_iod_mode(
            k in 0.2f64..5.0, theta in -3.0f64..3.0, tx in -50.0f64..50.0, ty in -50.0f64..50.0,
            jitter in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 6),
        ) {
            let truth: Vec<[f64; 2]> = (0..6).map(|i| [10.0 * i as f64, 3.0 * (i * i) as f64]).collect();
            let pred: Vec<[f64; 2]> = truth.iter().zip(&jitter).map(|(p, d)| [p[0] + d.0, p[1] + d.1]).collect();
            let (c, s) = (theta.cos(), theta.sin());
            let tf = |p: &[f64; 2]| [k * (c * p[0] - s * p[1]) + tx, k * (s * p[0] + c * p[1]) + ty];
            let e0 = normalized_error(&set(pred.clone()), &set(truth.clone()), NormMode::Iod, Some([0, 5])).unwrap();
            let e1 = normalized_error(
                &set(pred.iter().map(tf).collect()),
                &set(truth.iter().map(tf).collect()),
                NormMode::Iod,
                Some([0, 5]),
            ).unwrap();
            prop_assert!((e0 - e1).abs() <= 1e-12 * e0.max(1.0));
        }
    }
}
