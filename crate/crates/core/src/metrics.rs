//! Multi-label ranking criteria: coverage, ranking loss, label-ranking
//! average precision and the macro/micro/example AUC family.
//!
//! All definitions follow the usual multi-label conventions: ranks come
//! from descending scores, and tied comparisons earn 0.5 credit. Labels
//! tied on score are ranked by ascending label index, which keeps every
//! criterion deterministic.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no evaluation pairs supplied")]
    EmptyInput,
    #[error("no pair is usable for this criterion")]
    NoUsablePairs,
    #[error("scores and truth have lengths {0} and {1}")]
    DimensionMismatch(usize, usize),
    #[error("score at index {0} is not finite")]
    NonFiniteScore(usize),
    #[error("truth at index {0} is {1}, expected 0 or 1")]
    InvalidTruth(usize, u8),
}

/// One example's confidence scores and binary ground truth.
#[derive(Debug, Clone)]
pub struct EvalPair {
    scores: Vec<f64>,
    truth: Vec<u8>,
}

impl EvalPair {
    pub fn new(scores: Vec<f64>, truth: Vec<u8>) -> Result<EvalPair, MetricsError> {
        if scores.len() != truth.len() {
            return Err(MetricsError::DimensionMismatch(scores.len(), truth.len()));
        }
        for (i, &s) in scores.iter().enumerate() {
            if !s.is_finite() {
                return Err(MetricsError::NonFiniteScore(i));
            }
        }
        for (i, &t) in truth.iter().enumerate() {
            if t > 1 {
                return Err(MetricsError::InvalidTruth(i, t));
            }
        }
        Ok(EvalPair { scores, truth })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn truth(&self) -> &[u8] {
        &self.truth
    }

    fn relevant_count(&self) -> usize {
        self.truth.iter().filter(|&&t| t == 1).count()
    }

    /// 1-based rank of label `j` under descending scores; ties broken by
    /// ascending label index.
    fn rank(&self, j: usize) -> usize {
        let s = self.scores[j];
        let mut rank = 1;
        for (k, &other) in self.scores.iter().enumerate() {
            if other > s || (other == s && k < j) {
                rank += 1;
            }
        }
        rank
    }
}

/// Criterion value plus the number of pairs the criterion had to skip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricOutcome {
    pub value: f64,
    pub skipped: usize,
}

fn require_nonempty(pairs: &[EvalPair]) -> Result<(), MetricsError> {
    if pairs.is_empty() {
        Err(MetricsError::EmptyInput)
    } else {
        Ok(())
    }
}

/// Mean over examples of (highest rank of any relevant label) − 1.
/// Pairs without relevant labels are skipped and counted.
pub fn coverage(pairs: &[EvalPair]) -> Result<MetricOutcome, MetricsError> {
    require_nonempty(pairs)?;
    let mut total = 0.0;
    let mut used = 0usize;
    for pair in pairs {
        if pair.relevant_count() == 0 {
            continue;
        }
        let worst = pair
            .truth
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == 1)
            .map(|(j, _)| pair.rank(j))
            .max()
            .unwrap();
        total += (worst - 1) as f64;
        used += 1;
    }
    if used == 0 {
        return Err(MetricsError::NoUsablePairs);
    }
    Ok(MetricOutcome {
        value: total / used as f64,
        skipped: pairs.len() - used,
    })
}

fn pairwise_credit(relevant: f64, irrelevant: f64) -> f64 {
    if relevant > irrelevant {
        1.0
    } else if relevant == irrelevant {
        0.5
    } else {
        0.0
    }
}

/// Fraction of (relevant, irrelevant) label pairs ordered incorrectly,
/// averaged over examples; ties count 0.5. Examples lacking either class
/// are skipped and counted.
pub fn ranking_loss(pairs: &[EvalPair]) -> Result<MetricOutcome, MetricsError> {
    require_nonempty(pairs)?;
    let mut total = 0.0;
    let mut used = 0usize;
    for pair in pairs {
        let rel = pair.relevant_count();
        let irr = pair.truth.len() - rel;
        if rel == 0 || irr == 0 {
            continue;
        }
        let mut wrong = 0.0;
        for (j, &tj) in pair.truth.iter().enumerate() {
            if tj != 1 {
                continue;
            }
            for (k, &tk) in pair.truth.iter().enumerate() {
                if tk == 1 {
                    continue;
                }
                wrong += 1.0 - pairwise_credit(pair.scores[j], pair.scores[k]);
            }
        }
        total += wrong / (rel * irr) as f64;
        used += 1;
    }
    if used == 0 {
        return Err(MetricsError::NoUsablePairs);
    }
    Ok(MetricOutcome {
        value: total / used as f64,
        skipped: pairs.len() - used,
    })
}

/// Label-ranking average precision: for each relevant label, the fraction
/// of labels ranked at or above it that are relevant, averaged over
/// relevant labels and then over examples.
pub fn average_precision(pairs: &[EvalPair]) -> Result<MetricOutcome, MetricsError> {
    require_nonempty(pairs)?;
    let mut total = 0.0;
    let mut used = 0usize;
    for pair in pairs {
        if pair.relevant_count() == 0 {
            continue;
        }
        let ranks: Vec<usize> = (0..pair.truth.len()).map(|j| pair.rank(j)).collect();
        let mut example = 0.0;
        let mut rel = 0usize;
        for (j, &tj) in pair.truth.iter().enumerate() {
            if tj != 1 {
                continue;
            }
            let above = pair
                .truth
                .iter()
                .enumerate()
                .filter(|&(k, &tk)| tk == 1 && ranks[k] <= ranks[j])
                .count();
            example += above as f64 / ranks[j] as f64;
            rel += 1;
        }
        total += example / rel as f64;
        used += 1;
    }
    if used == 0 {
        return Err(MetricsError::NoUsablePairs);
    }
    Ok(MetricOutcome {
        value: total / used as f64,
        skipped: pairs.len() - used,
    })
}

/// Macro, micro and example AUC. A flavor with no valid label / example /
/// cell pair is reported as `None` rather than failing the others.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AucFamily {
    pub macro_auc: Option<f64>,
    pub micro_auc: Option<f64>,
    pub example_auc: Option<f64>,
}

/// Mann–Whitney rank-sum AUC of `positives` vs `negatives`; ties 0.5.
fn rank_sum_auc(positives: &[f64], negatives: &[f64]) -> Option<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return None;
    }
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&s| (s, true))
        .chain(negatives.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    // Average ranks over tie groups, then sum the positives' ranks.
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1..=j
        for item in &all[i..j] {
            if item.1 {
                pos_rank_sum += avg_rank;
            }
        }
        i = j;
    }
    let np = positives.len() as f64;
    let nn = negatives.len() as f64;
    let u = pos_rank_sum - np * (np + 1.0) / 2.0;
    Some(u / (np * nn))
}

pub fn auc_family(pairs: &[EvalPair]) -> Result<AucFamily, MetricsError> {
    require_nonempty(pairs)?;
    let label_count = pairs[0].truth.len();
    for pair in pairs {
        if pair.truth.len() != label_count {
            return Err(MetricsError::DimensionMismatch(
                pair.truth.len(),
                label_count,
            ));
        }
    }

    // Macro: mean per-label AUC over labels with both classes present.
    let mut macro_sum = 0.0;
    let mut macro_labels = 0usize;
    for l in 0..label_count {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for pair in pairs {
            if pair.truth[l] == 1 {
                pos.push(pair.scores[l]);
            } else {
                neg.push(pair.scores[l]);
            }
        }
        if let Some(auc) = rank_sum_auc(&pos, &neg) {
            macro_sum += auc;
            macro_labels += 1;
        }
    }
    let macro_auc = (macro_labels > 0).then(|| macro_sum / macro_labels as f64);

    // Micro: pool every (example, label) cell.
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for pair in pairs {
        for (s, &t) in pair.scores.iter().zip(pair.truth.iter()) {
            if t == 1 {
                pos.push(*s);
            } else {
                neg.push(*s);
            }
        }
    }
    let micro_auc = rank_sum_auc(&pos, &neg);

    // Example: mean per-example AUC over examples with both classes.
    let mut example_sum = 0.0;
    let mut example_count = 0usize;
    for pair in pairs {
        let pos: Vec<f64> = pair
            .scores
            .iter()
            .zip(pair.truth.iter())
            .filter(|(_, &t)| t == 1)
            .map(|(s, _)| *s)
            .collect();
        let neg: Vec<f64> = pair
            .scores
            .iter()
            .zip(pair.truth.iter())
            .filter(|(_, &t)| t == 0)
            .map(|(s, _)| *s)
            .collect();
        if let Some(auc) = rank_sum_auc(&pos, &neg) {
            example_sum += auc;
            example_count += 1;
        }
    }
    let example_auc = (example_count > 0).then(|| example_sum / example_count as f64);

    Ok(AucFamily {
        macro_auc,
        micro_auc,
        example_auc,
    })
}

/// All six criteria for one prediction source, serialisable as a flat
/// JSON object or a CSV row.
#[derive(Debug, Clone, Serialize)]
pub struct EvaluationReport {
    pub source: String,
    pub coverage: f64,
    pub ranking_loss: f64,
    pub average_precision: f64,
    pub macro_auc: Option<f64>,
    pub micro_auc: Option<f64>,
    pub example_auc: Option<f64>,
}

impl EvaluationReport {
    pub fn compute(source: &str, pairs: &[EvalPair]) -> Result<EvaluationReport, MetricsError> {
        let auc = auc_family(pairs)?;
        Ok(EvaluationReport {
            source: source.to_string(),
            coverage: coverage(pairs)?.value,
            ranking_loss: ranking_loss(pairs)?.value,
            average_precision: average_precision(pairs)?.value,
            macro_auc: auc.macro_auc,
            micro_auc: auc.micro_auc,
            example_auc: auc.example_auc,
        })
    }

    pub fn csv_header() -> &'static str {
        "source,coverage,ranking_loss,average_precision,macro_auc,micro_auc,example_auc"
    }

    pub fn csv_row(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
        format!(
            "{},{:.6},{:.6},{:.6},{},{},{}",
            self.source,
            self.coverage,
            self.ranking_loss,
            self.average_precision,
            fmt(self.macro_auc),
            fmt(self.micro_auc),
            fmt(self.example_auc)
        )
    }
}
