//! Voxelwise classification statistics, scar burden, and agreement analysis.
//!
//! Ratios with an empty denominator follow one convention throughout: the
//! value is 1.0 when the class in the denominator is absent from both
//! prediction and truth, 0.0 otherwise, and a flag names the statistic.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::baselines::wall_region;
use crate::error::{Error, Result};
use crate::phantom::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn confusion(pred: &Mask, truth: &Mask) -> Result<ConfusionCounts> {
    if pred.extents() != truth.extents() {
        return Err(Error::shape(
            "confusion",
            format!("prediction {:?} vs truth {:?}", pred.extents(), truth.extents()),
        ));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Accuracy, sensitivity, specificity and Dice of one segmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub dice: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

fn ratio(num: u64, den: u64, absent_in_both: bool, name: &str, flags: &mut Vec<String>) -> f64 {
    if den > 0 {
        return num as f64 / den as f64;
    }
    if absent_in_both {
        flags.push(format!("{name}: class absent in prediction and truth, defined as 1"));
        1.0
    } else {
        flags.push(format!("{name}: class absent in truth only, defined as 0"));
        0.0
    }
}

pub fn derive(c: &ConfusionCounts) -> Scores {
    let mut flags = Vec::new();
    let pred_pos = c.tp + c.fp;
    let pred_neg = c.tn + c.fn_;
    let accuracy = ratio(c.tp + c.tn, c.total(), true, "accuracy", &mut flags);
    let sensitivity = ratio(c.tp, c.tp + c.fn_, pred_pos == 0, "sensitivity", &mut flags);
    let specificity = ratio(c.tn, c.tn + c.fp, pred_neg == 0, "specificity", &mut flags);
    let dice = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, true, "dice", &mut flags);
    Scores {
        accuracy,
        sensitivity,
        specificity,
        dice,
        flags,
    }
}

pub fn score(pred: &Mask, truth: &Mask) -> Result<Scores> {
    Ok(derive(&confusion(pred, truth)?))
}

/// `100 · |scar ∩ wall| / |wall|`, with the wall shell of radius `wall_radius`
/// around the LA/PV boundary.
pub fn scar_percentage(scar: &Mask, la_pv: &Mask, wall_radius: f64) -> Result<f64> {
    let wall = wall_region(la_pv, wall_radius)?;
    let wall = wall.mask();
    if scar.extents() != wall.extents() {
        return Err(Error::shape(
            "scar_percentage",
            format!("scar {:?} vs LA/PV {:?}", scar.extents(), wall.extents()),
        ));
    }
    let on_wall = scar.data().iter().zip(wall.data()).filter(|(&s, &w)| s && w).count();
    Ok(100.0 * on_wall as f64 / wall.count() as f64)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::shape("pearson", format!("{} vs {} values", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::invalid("pearson", "need at least two pairs"));
    }
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        let which = if sxx == 0.0 { "first" } else { "second" };
        return Err(Error::invalid("pearson", format!("{which} sample has zero variance")));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    pub mean_diff: f64,
    /// Sample (n − 1) standard deviation of the differences.
    pub sd_diff: f64,
    pub loa_low: f64,
    pub loa_high: f64,
    /// Share of differences inside the closed interval `[loa_low, loa_high]`.
    pub fraction_within: f64,
}

pub fn bland_altman(xs: &[f64], ys: &[f64]) -> Result<BlandAltman> {
    if xs.len() != ys.len() {
        return Err(Error::shape("bland_altman", format!("{} vs {} values", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::invalid("bland_altman", "need at least two pairs"));
    }
    let diffs: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| x - y).collect();
    let mean_diff = mean(&diffs);
    let var = diffs.iter().map(|d| (d - mean_diff).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64;
    let sd_diff = var.sqrt();
    let loa_low = mean_diff - 1.96 * sd_diff;
    let loa_high = mean_diff + 1.96 * sd_diff;
    let within = diffs.iter().filter(|&&d| d >= loa_low && d <= loa_high).count();
    Ok(BlandAltman {
        mean_diff,
        sd_diff,
        loa_low,
        loa_high,
        fraction_within: within as f64 / diffs.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementStats {
    /// `None` when either sample has zero variance (see `flags`).
    pub pearson_r: Option<f64>,
    pub bland_altman: BlandAltman,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

/// Agreement between predicted (`xs`) and reference (`ys`) measurements.
pub fn agreement(xs: &[f64], ys: &[f64]) -> Result<AgreementStats> {
    let bland_altman = bland_altman(xs, ys)?;
    let (pearson_r, flags) = match pearson(xs, ys) {
        Ok(r) => (Some(r), Vec::new()),
        Err(e) => (None, vec![e.to_string()]),
    };
    Ok(AgreementStats {
        pearson_r,
        bland_altman,
        flags,
    })
}

/// Mean and sample standard deviation (0 for a single value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Option<MeanStd> {
        if xs.is_empty() {
            return None;
        }
        // shifted by the first value so identical inputs give exactly 0
        let shift = xs[0];
        let d: Vec<f64> = xs.iter().map(|x| x - shift).collect();
        let dm = mean(&d);
        let std = if xs.len() < 2 {
            0.0
        } else {
            (d.iter().map(|x| (x - dm).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
        };
        Some(MeanStd { mean: shift + dm, std, n: xs.len() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateScores {
    pub accuracy: MeanStd,
    pub sensitivity: MeanStd,
    pub specificity: MeanStd,
    pub dice: MeanStd,
}

impl AggregateScores {
    pub fn of<'a>(scores: impl IntoIterator<Item = &'a Scores>) -> Option<AggregateScores> {
        let s: Vec<&Scores> = scores.into_iter().collect();
        let col = |f: fn(&Scores) -> f64| MeanStd::of(&s.iter().map(|x| f(x)).collect::<Vec<_>>());
        Some(AggregateScores {
            accuracy: col(|x| x.accuracy)?,
            sensitivity: col(|x| x.sensitivity)?,
            specificity: col(|x| x.specificity)?,
            dice: col(|x| x.dice)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScarBurden {
    pub predicted: f64,
    pub truth: f64,
}

/// Scores of one volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeMetrics {
    pub id: String,
    pub la_pv: Option<Scores>,
    pub scar: Option<Scores>,
    /// Scar percentage of the wall, predicted vs ground truth.
    pub scar_percentage: Option<ScarBurden>,
}

impl VolumeMetrics {
    /// Scores whichever of `la_pv` / `scar` predictions are given against the truth masks.
    /// Scar percentages use the ground-truth LA/PV wall for both prediction and truth.
    pub fn evaluate(
        id: impl Into<String>,
        la_pv: Option<(&Mask, &Mask)>,
        scar: Option<(&Mask, &Mask)>,
        truth_la_pv: Option<&Mask>,
        wall_radius: f64,
    ) -> Result<VolumeMetrics> {
        let la_scores = la_pv.map(|(p, t)| score(p, t)).transpose()?;
        let scar_scores = scar.map(|(p, t)| score(p, t)).transpose()?;
        let burden = match (scar, truth_la_pv) {
            (Some((p, t)), Some(la)) if la.count() > 0 => Some(ScarBurden {
                predicted: scar_percentage(p, la, wall_radius)?,
                truth: scar_percentage(t, la, wall_radius)?,
            }),
            _ => None,
        };
        Ok(VolumeMetrics {
            id: id.into(),
            la_pv: la_scores,
            scar: scar_scores,
            scar_percentage: burden,
        })
    }
}

/// Per-volume rows plus aggregate mean ± std blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub volumes: Vec<VolumeMetrics>,
    pub la_pv: Option<AggregateScores>,
    pub scar: Option<AggregateScores>,
    pub scar_percentage: Option<MeanStd>,
    /// Predicted vs ground-truth scar percentage; needs two or more volumes.
    pub agreement: Option<AgreementStats>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl MetricsReport {
    pub fn from_volumes(volumes: Vec<VolumeMetrics>) -> MetricsReport {
        let la_pv = AggregateScores::of(volumes.iter().filter_map(|v| v.la_pv.as_ref()));
        let scar = AggregateScores::of(volumes.iter().filter_map(|v| v.scar.as_ref()));
        let burdens: Vec<ScarBurden> = volumes.iter().filter_map(|v| v.scar_percentage).collect();
        let pred: Vec<f64> = burdens.iter().map(|b| b.predicted).collect();
        let truth: Vec<f64> = burdens.iter().map(|b| b.truth).collect();
        let mut flags = Vec::new();
        let agreement = if burdens.len() >= 2 {
            agreement(&pred, &truth).ok()
        } else {
            if !burdens.is_empty() {
                flags.push("agreement statistics need at least two volumes".to_string());
            }
            None
        };
        for v in &volumes {
            for (task, s) in [("la_pv", &v.la_pv), ("scar", &v.scar)] {
                if let Some(s) = s {
                    flags.extend(s.flags.iter().map(|f| format!("{}/{task}: {f}", v.id)));
                }
            }
        }
        MetricsReport {
            la_pv,
            scar,
            scar_percentage: MeanStd::of(&pred),
            agreement,
            flags,
            volumes,
        }
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("report serialises");
        out.push(b'\n');
        out
    }

    pub const CSV_HEADER: &'static str = "id,la_accuracy,la_sensitivity,la_specificity,la_dice,\
scar_accuracy,scar_sensitivity,scar_specificity,scar_dice,scar_pct_pred,scar_pct_truth,flags";

    /// One row per volume; empty cells for absent tasks.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for v in &self.volumes {
            out.push_str(&csv_field(&v.id));
            for s in [&v.la_pv, &v.scar] {
                match s {
                    Some(s) => {
                        let _ = write!(out, ",{},{},{},{}", s.accuracy, s.sensitivity, s.specificity, s.dice);
                    }
                    None => out.push_str(",,,,"),
                }
            }
            match v.scar_percentage {
                Some(b) => {
                    let _ = write!(out, ",{},{}", b.predicted, b.truth);
                }
                None => out.push_str(",,"),
            }
            let flags: Vec<&str> = [&v.la_pv, &v.scar]
                .into_iter()
                .flatten()
                .flat_map(|s| s.flags.iter().map(String::as_str))
                .collect();
            out.push(',');
            out.push_str(&csv_field(&flags.join("; ")));
            out.push('\n');
        }
        out
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn hand_arithmetic() {
        let s = derive(&ConfusionCounts { tp: 1, fp: 1, tn: 1, fn_: 1 });
        assert_eq!((s.dice, s.accuracy), (0.5, 0.5));
        assert!(s.flags.is_empty());
    }

    #[test]
    fn absent_class_convention() {
        let s = derive(&ConfusionCounts { tp: 0, fp: 0, tn: 8, fn_: 0 });
        assert_eq!(s.sensitivity, 1.0);
        assert_eq!(s.dice, 1.0);
        assert_eq!(s.flags.len(), 2);
        let s = derive(&ConfusionCounts { tp: 0, fp: 2, tn: 6, fn_: 0 });
        assert_eq!(s.sensitivity, 0.0);
        assert_eq!(s.dice, 0.0);
        assert!(s.flags.iter().any(|f| f.starts_with("sensitivity")));
    }

    #[test]
    fn bland_altman_two_diffs() {
        let ba = bland_altman(&[1.0, 2.0], &[2.0, 1.0]).unwrap();
        assert_eq!(ba.mean_diff, 0.0);
        assert_abs_diff_eq!(ba.sd_diff, 2f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(ba.loa_high, 1.96 * 2f64.sqrt(), epsilon = 1e-12);
        assert_eq!(ba.fraction_within, 1.0);
    }

    #[test]
    fn identical_measurements_are_within_closed_limits() {
        let xs = [3.0, 4.0, 7.5];
        let ba = bland_altman(&xs, &xs).unwrap();
        assert_eq!((ba.loa_low, ba.loa_high, ba.fraction_within), (0.0, 0.0, 1.0));
    }

    #[test]
    fn pearson_zero_variance_is_named() {
        let err = pearson(&[1.0, 1.0], &[1.0, 2.0]).unwrap_err().to_string();
        assert!(err.contains("zero variance"), "{err}");
    }

    #[test]
    fn csv_has_row_per_volume() {
        let la = Mask::from_fn((2, 2, 2), |x, _, _| x == 0);
        let v = VolumeMetrics::evaluate("a", Some((&la, &la)), None, Some(&la), 1.0).unwrap();
        let r = MetricsReport::from_volumes(vec![v.clone(), VolumeMetrics { id: "b".into(), ..v }]);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().starts_with("a,1,1,1,1,,,,,,,"));
    }
}
