//! Confusion counts, ACC/TPR/FPR and ROC/AUC. PD is the positive class.

use std::cmp::Ordering;

use super::TrainError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(predicted_pd: &[bool], actual_pd: &[bool]) -> Self {
        let mut c = Confusion::default();
        for (&p, &a) in predicted_pd.iter().zip(actual_pd) {
            match (p, a) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn merge(&self, other: &Confusion) -> Confusion {
        Confusion {
            tp: self.tp + other.tp,
            tn: self.tn + other.tn,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
        }
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Ratios are `None` where their denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub confusion: Confusion,
    pub acc: Option<f64>,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub auc: Option<f64>,
}

impl Metrics {
    pub fn from_confusion(confusion: Confusion, auc: Option<f64>) -> Self {
        let Confusion { tp, tn, fp, fn_ } = confusion;
        Metrics {
            confusion,
            acc: ratio(tp + tn, confusion.total()),
            tpr: ratio(tp, tp + fn_),
            fpr: ratio(fp, fp + tn),
            auc,
        }
    }

    /// Metrics for PD scores and ground truth, thresholded at `p > 0.5`.
    pub fn from_scores(scores: &[f64], actual_pd: &[bool]) -> Self {
        let predicted: Vec<bool> = scores.iter().map(|&p| p > 0.5).collect();
        let confusion = Confusion::from_predictions(&predicted, actual_pd);
        Metrics::from_confusion(confusion, roc_auc(scores, actual_pd).ok())
    }

    /// Key-value document; undefined ratios are written as `"undefined"`.
    pub fn to_document(&self) -> String {
        let fmt = |v: Option<f64>| {
            v.map(|x| x.to_string())
                .unwrap_or_else(|| "\"undefined\"".into())
        };
        let c = self.confusion;
        format!(
            "tp = {}\ntn = {}\nfp = {}\nfn = {}\nacc = {}\ntpr = {}\nfpr = {}\nauc = {}\n",
            c.tp,
            c.tn,
            c.fp,
            c.fn_,
            fmt(self.acc),
            fmt(self.tpr),
            fmt(self.fpr),
            fmt(self.auc)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores `>= threshold` are called positive; the first point uses +∞.
    pub threshold: f64,
}

fn check_classes(scores: &[f64], labels: &[bool]) -> Result<(usize, usize), TrainError> {
    if scores.len() != labels.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(TrainError::InvalidInput("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(TrainError::SingleClass);
    }
    Ok((pos, neg))
}

// (true positives, false positives) after each distinct-score group, scores descending.
fn sweep(scores: &[f64], labels: &[bool]) -> Vec<(f64, usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((s, tp, fp));
    }
    out
}

pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>, TrainError> {
    let (pos, neg) = check_classes(scores, labels)?;
    let mut pts = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    pts.extend(
        sweep(scores, labels)
            .into_iter()
            .map(|(s, tp, fp)| RocPoint {
                fpr: fp as f64 / neg as f64,
                tpr: tp as f64 / pos as f64,
                threshold: s,
            }),
    );
    Ok(pts)
}

/// Area under the ROC curve by threshold sweep and trapezoidal integration.
///
/// Tied scores form one diagonal segment, so the result equals the
/// Mann-Whitney statistic `(#wins + ½ #ties) / (#pos · #neg)`.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, TrainError> {
    let (pos, neg) = check_classes(scores, labels)?;
    // Twice the area in units of (1/pos)·(1/neg); stays an exact integer.
    let mut twice_area: u128 = 0;
    let (mut prev_tp, mut prev_fp) = (0usize, 0usize);
    for (_, tp, fp) in sweep(scores, labels) {
        twice_area += ((fp - prev_fp) * (tp + prev_tp)) as u128;
        prev_tp = tp;
        prev_fp = fp;
    }
    Ok(twice_area as f64 / (2.0 * pos as f64 * neg as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_counts() {
        let m = Metrics::from_confusion(
            Confusion {
                tp: 3,
                tn: 4,
                fp: 1,
                fn_: 2,
            },
            None,
        );
        assert_eq!(m.acc, Some(0.7));
        assert_eq!(m.tpr, Some(0.6));
        assert_eq!(m.fpr, Some(0.2));
    }

    #[test]
    fn undefined_ratios() {
        let m = Metrics::from_confusion(
            Confusion {
                tp: 0,
                tn: 5,
                fp: 1,
                fn_: 0,
            },
            None,
        );
        assert_eq!(m.tpr, None);
        assert!(m.to_document().contains("tpr = \"undefined\""));
        let perfect = Metrics::from_confusion(
            Confusion {
                tp: 2,
                tn: 3,
                fp: 0,
                fn_: 0,
            },
            None,
        );
        assert_eq!(perfect.acc, Some(1.0));
        assert_eq!(perfect.fpr, Some(0.0));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(
            roc_auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(),
            1.0
        );
        assert_eq!(
            roc_auc(&[0.5; 4], &[true, false, true, false]).unwrap(),
            0.5
        );
        assert_eq!(
            roc_auc(&[0.9, 0.4, 0.6, 0.1], &[true, true, false, false]).unwrap(),
            0.75
        );
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[true, true]),
            Err(TrainError::SingleClass)
        ));
    }

    #[test]
    fn roc_curve_endpoints() {
        let pts = roc_curve(&[0.9, 0.4, 0.6, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(pts.first().map(|p| (p.fpr, p.tpr)), Some((0.0, 0.0)));
        assert_eq!(pts.last().map(|p| (p.fpr, p.tpr)), Some((1.0, 1.0)));
        assert!(pts.windows(2).all(|w| w[0].threshold > w[1].threshold));
    }
}
