//! Pure accuracy arithmetic over parsed action sequences. Both the training
//! loop's dev ticks and the reporting harnesses call into here so the two
//! can never disagree about what "correct" means.

use std::collections::BTreeMap;

use crate::corpus::Action;
use crate::error::{Error, Result};

/// Per-b-slot tally of how often positions carrying that gold b-slot were
/// predicted correctly.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BslotTally {
    pub hits: usize,
    pub total: usize,
}

impl BslotTally {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.hits as f64 / self.total as f64
        }
    }
}

/// Accuracy over a batch of examples. A prediction of `None` is a decode
/// that failed to parse and scores zero everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracySummary {
    pub bslot_acc: f64,
    pub value_acc: f64,
    pub n_examples: usize,
    pub per_bslot: BTreeMap<String, BslotTally>,
}

/// Combine summaries from repeated runs (one per seed, say) into one.
/// Scalar accuracies are example-weighted means of the parts; for value
/// accuracy, whose exact position weights are not recorded, that mean of
/// micro-averages is the declared aggregation. Tallies are summed.
pub fn merge_summaries(parts: &[AccuracySummary]) -> Result<AccuracySummary> {
    if parts.is_empty() {
        return Err(Error::Config("no summaries to merge".into()));
    }
    let n_examples: usize = parts.iter().map(|p| p.n_examples).sum();
    if n_examples == 0 {
        return Err(Error::Config("merged summaries cover no examples".into()));
    }
    let weighted = |f: fn(&AccuracySummary) -> f64| {
        parts
            .iter()
            .map(|p| f(p) * p.n_examples as f64)
            .sum::<f64>()
            / n_examples as f64
    };
    let mut per_bslot: BTreeMap<String, BslotTally> = BTreeMap::new();
    for p in parts {
        for (bslot, tally) in &p.per_bslot {
            let entry = per_bslot.entry(bslot.clone()).or_default();
            entry.hits += tally.hits;
            entry.total += tally.total;
        }
    }
    Ok(AccuracySummary {
        bslot_acc: weighted(|p| p.bslot_acc),
        value_acc: weighted(|p| p.value_acc),
        n_examples,
        per_bslot,
    })
}

/// Score predictions against gold action sequences.
///
/// B-slot accuracy is per example: positions are compared in order, the
/// denominator is the longer of the two sequences, and the per-example
/// scores are averaged. A single-action task makes this plain exact match.
/// Value accuracy is micro-averaged over the positions whose b-slots agree;
/// with no such position it is 0.
pub fn action_accuracy(
    golds: &[Vec<Action>],
    preds: &[Option<Vec<Action>>],
) -> Result<AccuracySummary> {
    if golds.is_empty() {
        return Err(Error::Config("accuracy over an empty example set".into()));
    }
    if golds.len() != preds.len() {
        return Err(Error::Config(format!(
            "{} gold sequences against {} predictions",
            golds.len(),
            preds.len()
        )));
    }
    let mut bslot_sum = 0.0;
    let mut value_hits = 0usize;
    let mut value_total = 0usize;
    let mut per_bslot: BTreeMap<String, BslotTally> = BTreeMap::new();
    for (gold, pred) in golds.iter().zip(preds) {
        let empty = Vec::new();
        let pred = pred.as_ref().unwrap_or(&empty);
        let span = gold.len().max(pred.len()).max(1);
        let mut matched = 0usize;
        for (i, g) in gold.iter().enumerate() {
            let tally = per_bslot.entry(g.bslot.clone()).or_default();
            tally.total += 1;
            let Some(p) = pred.get(i) else { continue };
            if p.bslot == g.bslot {
                matched += 1;
                tally.hits += 1;
                value_total += 1;
                if p.values == g.values {
                    value_hits += 1;
                }
            }
        }
        bslot_sum += matched as f64 / span as f64;
    }
    Ok(AccuracySummary {
        bslot_acc: bslot_sum / golds.len() as f64,
        value_acc: if value_total == 0 {
            0.0
        } else {
            value_hits as f64 / value_total as f64
        },
        n_examples: golds.len(),
        per_bslot,
    })
}

/// Pearson correlation; `None` when either variable has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    // A constant series has no correlation; test equality directly because
    // the subtracted mean of identical values need not be bit-exact.
    if xs.iter().all(|x| *x == xs[0]) || ys.iter().all(|y| *y == ys[0]) {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}
