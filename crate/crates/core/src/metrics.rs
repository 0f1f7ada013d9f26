//! Dice similarity coefficient and aggregate segmentation statistics.
//!
//! The DSC between two binary masks is 2|A∩B| / (|A|+|B|). When both masks
//! are empty the coefficient is defined as 1.0: a correct "no lesion"
//! prediction is not penalized. This convention matters on lesion-free
//! slices and is relied on by the task partitioner.

use crate::tensor::LabelMap;
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum MetricsError {
    ShapeMismatch { pred: (usize, usize), truth: (usize, usize) },
    ClassOutOfRange { class: u8, num_classes: u8 },
    EmptyInput { what: &'static str },
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::ShapeMismatch { pred, truth } => write!(
                f,
                "label map shapes differ: pred {}x{}, truth {}x{}",
                pred.0, pred.1, truth.0, truth.1
            ),
            MetricsError::ClassOutOfRange { class, num_classes } => {
                write!(f, "class {class} out of range for {num_classes} classes")
            }
            MetricsError::EmptyInput { what } => write!(f, "empty input: {what}"),
        }
    }
}

impl std::error::Error for MetricsError {}

/// Raw overlap counts for one class, kept so reports can be re-aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassCounts {
    pub intersection: usize,
    pub pred: usize,
    pub truth: usize,
}

/// Per-class DSC for one slice plus the mean over foreground classes.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceReport {
    pub per_class: Vec<f64>,
    pub counts: Vec<ClassCounts>,
    /// Mean DSC over foreground classes (1..K-1) present in either map.
    /// If no foreground class is present at all, 1.0 (everything that
    /// should be empty is empty).
    pub mean_foreground: f64,
}

fn check_shapes(pred: &LabelMap, truth: &LabelMap) -> Result<(), MetricsError> {
    if pred.height() != truth.height() || pred.width() != truth.width() {
        return Err(MetricsError::ShapeMismatch {
            pred: (pred.height(), pred.width()),
            truth: (truth.height(), truth.width()),
        });
    }
    Ok(())
}

fn dsc_from_counts(c: ClassCounts) -> f64 {
    if c.pred + c.truth == 0 {
        1.0
    } else {
        2.0 * c.intersection as f64 / (c.pred + c.truth) as f64
    }
}

/// DSC of one class between two label maps.
pub fn dice(pred: &LabelMap, truth: &LabelMap, class: u8) -> Result<f64, MetricsError> {
    check_shapes(pred, truth)?;
    let mut counts = ClassCounts { intersection: 0, pred: 0, truth: 0 };
    for (&p, &t) in pred.data().iter().zip(truth.data().iter()) {
        let pm = p == class;
        let tm = t == class;
        counts.pred += pm as usize;
        counts.truth += tm as usize;
        counts.intersection += (pm && tm) as usize;
    }
    Ok(dsc_from_counts(counts))
}

/// Per-class DSC report over all classes in a single pass.
pub fn dice_report(
    pred: &LabelMap,
    truth: &LabelMap,
    num_classes: u8,
) -> Result<DiceReport, MetricsError> {
    check_shapes(pred, truth)?;
    if num_classes == 0 {
        return Err(MetricsError::EmptyInput { what: "num_classes" });
    }
    let k = num_classes as usize;
    let mut counts = vec![ClassCounts { intersection: 0, pred: 0, truth: 0 }; k];
    for (&p, &t) in pred.data().iter().zip(truth.data().iter()) {
        if p >= num_classes {
            return Err(MetricsError::ClassOutOfRange { class: p, num_classes });
        }
        if t >= num_classes {
            return Err(MetricsError::ClassOutOfRange { class: t, num_classes });
        }
        counts[p as usize].pred += 1;
        counts[t as usize].truth += 1;
        if p == t {
            counts[p as usize].intersection += 1;
        }
    }
    let per_class: Vec<f64> = counts.iter().map(|&c| dsc_from_counts(c)).collect();
    let mut fg_sum = 0.0;
    let mut fg_n = 0usize;
    for c in 1..k {
        if counts[c].pred + counts[c].truth > 0 {
            fg_sum += per_class[c];
            fg_n += 1;
        }
    }
    let mean_foreground = if fg_n == 0 { 1.0 } else { fg_sum / fg_n as f64 };
    Ok(DiceReport { per_class, counts, mean_foreground })
}

/// Mean and unbiased sample standard deviation of one value series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Mean/std over a plain series; n = 1 gives std 0.0 by convention.
pub fn mean_std(values: &[f64]) -> Result<MeanStd, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::EmptyInput { what: "value series" });
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
        (ss / (n - 1) as f64).sqrt()
    };
    Ok(MeanStd { mean, std, n })
}

/// Per-class mean and sample std across a set of slice reports.
pub fn aggregate(reports: &[DiceReport]) -> Result<Vec<MeanStd>, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::EmptyInput { what: "report list" });
    }
    let k = reports[0].per_class.len();
    (0..k)
        .map(|c| {
            let series: Vec<f64> = reports.iter().map(|r| r.per_class[c]).collect();
            mean_std(&series)
        })
        .collect()
}

pub const DICE_CSV_HEADER: &str = "patient,slice,class,dsc";

/// One CSV row per class: `patient,slice,class,dsc` with 6 decimals.
pub fn dice_csv_rows(patient: &str, slice: usize, report: &DiceReport) -> String {
    let mut out = String::new();
    for (class, dsc) in report.per_class.iter().enumerate() {
        out.push_str(&format!("{patient},{slice},{class},{dsc:.6}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn map_from(vals: &[u8], w: usize) -> LabelMap {
        LabelMap::new(vals.len() / w, w, vals.to_vec()).unwrap()
    }

    /// Independent oracle: per-class DSC by a naive double loop over pixels.
    fn brute_force_dice(pred: &LabelMap, truth: &LabelMap, class: u8) -> f64 {
        let mut inter = 0usize;
        let mut a = 0usize;
        let mut b = 0usize;
        for y in 0..pred.height() {
            for x in 0..pred.width() {
                if pred.get(y, x) == class {
                    a += 1;
                }
                if truth.get(y, x) == class {
                    b += 1;
                }
                if pred.get(y, x) == class && truth.get(y, x) == class {
                    inter += 1;
                }
            }
        }
        if a + b == 0 {
            1.0
        } else {
            2.0 * inter as f64 / (a + b) as f64
        }
    }

    #[test]
    fn identical_nonempty_masks_give_one() {
        let m = map_from(&[0, 1, 1, 0], 2);
        assert_eq!(dice(&m, &m, 1).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_masks_give_zero() {
        let a = map_from(&[1, 1, 0, 0], 2);
        let b = map_from(&[0, 0, 1, 1], 2);
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.0);
    }

    #[test]
    fn half_overlap_gives_half() {
        // pred 4 px, truth 4 px, overlap 2 px -> 2*2/8 = 0.5
        let pred = map_from(&[1, 1, 1, 1, 0, 0, 0, 0, 0], 3);
        let truth = map_from(&[1, 1, 0, 0, 1, 1, 0, 0, 0], 3);
        assert_eq!(dice(&pred, &truth, 1).unwrap(), 0.5);
    }

    #[test]
    fn empty_vs_empty_is_one() {
        let z = map_from(&[0, 0, 0, 0], 2);
        assert_eq!(dice(&z, &z, 3).unwrap(), 1.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = map_from(&[0, 0], 2);
        let b = map_from(&[0, 0, 0], 3);
        assert!(matches!(dice(&a, &b, 0), Err(MetricsError::ShapeMismatch { .. })));
    }

    #[test]
    fn symmetry_and_bounds_on_random_maps() {
        let mut rng = Rng::from_seed(31);
        for _ in 0..50 {
            let a = LabelMap::new(8, 8, (0..64).map(|_| rng.below(4) as u8).collect()).unwrap();
            let b = LabelMap::new(8, 8, (0..64).map(|_| rng.below(4) as u8).collect()).unwrap();
            for c in 0..4 {
                let ab = dice(&a, &b, c).unwrap();
                let ba = dice(&b, &a, c).unwrap();
                assert_eq!(ab, ba);
                assert!((0.0..=1.0).contains(&ab));
            }
        }
    }

    #[test]
    fn report_matches_brute_force_oracle_exactly() {
        let mut rng = Rng::from_seed(77);
        for _ in 0..100 {
            let a = LabelMap::new(16, 16, (0..256).map(|_| rng.below(4) as u8).collect()).unwrap();
            let b = LabelMap::new(16, 16, (0..256).map(|_| rng.below(4) as u8).collect()).unwrap();
            let report = dice_report(&a, &b, 4).unwrap();
            for c in 0..4u8 {
                assert_eq!(report.per_class[c as usize], brute_force_dice(&a, &b, c));
            }
        }
    }

    #[test]
    fn perfect_prediction_reports_all_ones() {
        let m = map_from(&[0, 1, 2, 3, 1, 2, 3, 0, 2], 3);
        let r = dice_report(&m, &m, 4).unwrap();
        assert_eq!(r.per_class, vec![1.0; 4]);
        assert_eq!(r.mean_foreground, 1.0);
    }

    #[test]
    fn all_background_prediction_zeroes_foreground() {
        let truth = map_from(&[0, 1, 2, 3], 2);
        let pred = map_from(&[0, 0, 0, 0], 2);
        let r = dice_report(&pred, &truth, 4).unwrap();
        assert_eq!(&r.per_class[1..], &[0.0, 0.0, 0.0]);
        assert_eq!(r.mean_foreground, 0.0);
    }

    #[test]
    fn lesion_free_slice_scores_one() {
        let z = map_from(&[0; 16], 4);
        let r = dice_report(&z, &z, 4).unwrap();
        assert_eq!(r.mean_foreground, 1.0);
    }

    #[test]
    fn label_out_of_range_is_an_error() {
        let bad = map_from(&[0, 5], 2);
        let ok = map_from(&[0, 0], 2);
        assert!(matches!(
            dice_report(&bad, &ok, 4),
            Err(MetricsError::ClassOutOfRange { class: 5, .. })
        ));
    }

    #[test]
    fn aggregate_two_point_example() {
        // DSC series [0.0, 1.0]: mean 0.5, sample std sqrt(0.5).
        let zeros = map_from(&[0, 0], 2);
        let ones = map_from(&[1, 1], 2);
        let r0 = dice_report(&zeros, &ones, 2).unwrap(); // class-1 DSC 0.0
        let r1 = dice_report(&ones, &ones, 2).unwrap(); // class-1 DSC 1.0
        let stats = aggregate(&[r0, r1]).unwrap();
        assert_eq!(stats[1].mean, 0.5);
        assert!((stats[1].std - 0.7071067811865476).abs() < 1e-12);
    }

    #[test]
    fn aggregate_single_report_has_zero_std() {
        let m = map_from(&[0, 1], 2);
        let stats = aggregate(&[dice_report(&m, &m, 2).unwrap()]).unwrap();
        assert_eq!(stats[1].std, 0.0);
        assert_eq!(stats[1].n, 1);
    }

    #[test]
    fn aggregate_empty_is_an_error() {
        assert!(matches!(aggregate(&[]), Err(MetricsError::EmptyInput { .. })));
    }

    #[test]
    fn identical_values_have_zero_std() {
        let s = mean_std(&[1.0, 1.0]).unwrap();
        assert_eq!((s.mean, s.std), (1.0, 0.0));
    }

    #[test]
    fn csv_rows_use_six_decimals() {
        let m = map_from(&[0, 1], 2);
        let r = dice_report(&m, &m, 2).unwrap();
        let rows = dice_csv_rows("pat000", 3, &r);
        assert_eq!(rows, "pat000,3,0,1.000000\npat000,3,1,1.000000\n");
    }
}
