//! NDCG@k evaluation on implicit and explicit labels, with constant-list
//! exclusion and the purchase-intent slice.

use serde::{Deserialize, Serialize};

use crate::dataset::{RankedList, Split};
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GainMode {
    /// `2^label - 1`, the LETOR-standard convention.
    Exponential,
    /// `label` as-is.
    Linear,
}

impl GainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GainMode::Exponential => "exponential",
            GainMode::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "exponential" => Ok(GainMode::Exponential),
            "linear" => Ok(GainMode::Linear),
            other => Err(Error::Config(format!("unknown gain mode `{other}`"))),
        }
    }

    fn gain(self, label: u8) -> f64 {
        match self {
            GainMode::Exponential => ((1u64 << label) - 1) as f64,
            GainMode::Linear => label as f64,
        }
    }
}

/// NDCG@k for one list, or `None` when the label vector is constant and the
/// list is excluded from aggregation. Ties in the score break by ascending
/// original index, so evaluation is reproducible.
pub fn ndcg_at_k<F: Scalar>(
    scores: &[F],
    labels: &[u8],
    k: usize,
    gain: GainMode,
) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::DimMismatch(format!(
            "scores ({}) vs labels ({})",
            scores.len(),
            labels.len()
        )));
    }
    if k == 0 {
        return Err(Error::Config("ndcg k must be >= 1".into()));
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput("ndcg_at_k on empty list".into()));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Ok(None);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores must be finite")
            .then(a.cmp(&b))
    });

    let depth = k.min(labels.len());
    let dcg: f64 = order
        .iter()
        .take(depth)
        .enumerate()
        .map(|(rank, &i)| gain.gain(labels[i]) / ((rank + 2) as f64).log2())
        .sum();

    let mut ideal = labels.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(depth)
        .enumerate()
        .map(|(rank, &l)| gain.gain(l) / ((rank + 2) as f64).log2())
        .sum();

    Ok(Some(dcg / idcg))
}

/// Aggregated NDCG figures, all scaled by 100. For each metric,
/// `evaluated + excluded` equals the metric's eligible list count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub k: usize,
    pub total_lists: usize,
    pub ndcg_y: Option<f64>,
    pub ndcg_y_evaluated: usize,
    pub ndcg_y_excluded: usize,
    pub ndcg_r: Option<f64>,
    pub ndcg_r_evaluated: usize,
    pub ndcg_r_excluded: usize,
    /// NDCG on implicit labels over lists whose listwide label is y_max.
    pub ndcg_y_purchase: Option<f64>,
    pub ndcg_y_purchase_evaluated: usize,
    pub ndcg_y_purchase_excluded: usize,
}

#[derive(Default)]
struct Accumulator {
    sum: f64,
    evaluated: usize,
    excluded: usize,
}

impl Accumulator {
    fn add(&mut self, outcome: Option<f64>) {
        match outcome {
            Some(v) => {
                self.sum += v;
                self.evaluated += 1;
            }
            None => self.excluded += 1,
        }
    }

    fn mean_x100(&self) -> Option<f64> {
        (self.evaluated > 0).then(|| 100.0 * self.sum / self.evaluated as f64)
    }
}

/// Aggregates NDCG over a split given precomputed scores, one score vector
/// per list in split order.
pub fn evaluate_scores<F: Scalar>(
    lists: &[RankedList<F>],
    scores: &[Vec<F>],
    k: usize,
    gain: GainMode,
    y_max: u8,
) -> Result<MetricsReport> {
    if lists.len() != scores.len() {
        return Err(Error::DimMismatch(format!(
            "{} lists but {} score vectors",
            lists.len(),
            scores.len()
        )));
    }
    let mut acc_y = Accumulator::default();
    let mut acc_r = Accumulator::default();
    let mut acc_purchase = Accumulator::default();
    let mut any_implicit = false;

    for (list, s) in lists.iter().zip(scores) {
        let explicit = list.explicit_labels();
        acc_r.add(ndcg_at_k(s, &explicit, k, gain)?);
        if let Some(implicit) = list.implicit_labels() {
            any_implicit = true;
            let outcome = ndcg_at_k(s, &implicit, k, gain)?;
            acc_y.add(outcome);
            if list.listwide == Some(y_max) {
                acc_purchase.add(outcome);
            }
        }
    }

    Ok(MetricsReport {
        k,
        total_lists: lists.len(),
        ndcg_y: acc_y.mean_x100(),
        ndcg_y_evaluated: acc_y.evaluated,
        ndcg_y_excluded: acc_y.excluded,
        ndcg_r: acc_r.mean_x100(),
        ndcg_r_evaluated: acc_r.evaluated,
        ndcg_r_excluded: acc_r.excluded,
        ndcg_y_purchase: if any_implicit {
            acc_purchase.mean_x100()
        } else {
            None
        },
        ndcg_y_purchase_evaluated: acc_purchase.evaluated,
        ndcg_y_purchase_excluded: acc_purchase.excluded,
    })
}

/// Scores every list with the given scorer, then aggregates.
pub fn evaluate<F: Scalar>(
    split: &Split<F>,
    mut scorer: impl FnMut(&RankedList<F>) -> Result<Vec<F>>,
    k: usize,
    gain: GainMode,
    y_max: u8,
) -> Result<MetricsReport> {
    let scores = split
        .lists
        .iter()
        .map(&mut scorer)
        .collect::<Result<Vec<_>>>()?;
    evaluate_scores(&split.lists, &scores, k, gain, y_max)
}

fn fmt_metric(value: Option<f64>, evaluated: usize, excluded: usize) -> String {
    match value {
        Some(v) => format!("{v:7.2}  ({evaluated} lists, {excluded} excluded)"),
        None => format!("      -  (0 lists, {excluded} excluded)"),
    }
}

/// Aligned text rendering of a report.
pub fn render_report(report: &MetricsReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "NDCG@{} over {} lists\n",
        report.k, report.total_lists
    ));
    out.push_str(&format!(
        "  NDCG^y        {}\n",
        fmt_metric(report.ndcg_y, report.ndcg_y_evaluated, report.ndcg_y_excluded)
    ));
    out.push_str(&format!(
        "  NDCG^r        {}\n",
        fmt_metric(report.ndcg_r, report.ndcg_r_evaluated, report.ndcg_r_excluded)
    ));
    out.push_str(&format!(
        "  NDCG^y (t=2)  {}\n",
        fmt_metric(
            report.ndcg_y_purchase,
            report.ndcg_y_purchase_evaluated,
            report.ndcg_y_purchase_excluded
        )
    ));
    out
}
