//! Average precision over ranked frame scores.

use std::collections::BTreeMap;
use std::ops::{Add, Div};

use num_rational::Ratio;
use num_traits::{One, Zero};

use crate::error::{AsdError, Result};

/// Descending-score order; equal scores keep their input order.
fn ranking<S: PartialOrd + Copy>(scores: &[S]) -> Result<Vec<usize>> {
    if scores.iter().any(|s| s.partial_cmp(s).is_none()) {
        return Err(AsdError::Metric("scores contain NaN".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    Ok(order)
}

/// AP accumulated in `T`: `Σ_{k: label_k} precision@k / n_pos` over the
/// descending ranking. Counts are built by repeated addition of one, so any
/// exact numeric type works.
pub fn average_precision_in<T, S>(scores: &[S], labels: &[bool]) -> Result<T>
where
    T: Zero + One + Clone + Add<Output = T> + Div<Output = T>,
    S: PartialOrd + Copy,
{
    if scores.len() != labels.len() {
        return Err(AsdError::Metric(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if !labels.contains(&true) {
        return Err(AsdError::Metric("no positive labels".into()));
    }
    let mut rank = T::zero();
    let mut hits = T::zero();
    let mut sum = T::zero();
    for i in ranking(scores)? {
        rank = rank + T::one();
        if labels[i] {
            hits = hits + T::one();
            sum = sum + hits.clone() / rank.clone();
        }
    }
    Ok(sum / hits)
}

pub fn average_precision<S: PartialOrd + Copy>(scores: &[S], labels: &[bool]) -> Result<f64> {
    average_precision_in::<f64, S>(scores, labels)
}

/// Exact rational AP.
pub fn average_precision_exact<S: PartialOrd + Copy>(scores: &[S], labels: &[bool]) -> Result<Ratio<i64>> {
    average_precision_in::<Ratio<i64>, S>(scores, labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupedAp<G> {
    /// Unweighted mean over scored groups.
    pub map: f64,
    pub per_group: BTreeMap<G, f64>,
    /// Groups without a positive label, excluded from the mean.
    pub skipped: Vec<G>,
}

/// Mean of per-group AP over groups holding at least one positive.
pub fn map_over_groups<G: Ord + Clone, S: PartialOrd + Copy>(rows: &[(G, S, bool)]) -> Result<GroupedAp<G>> {
    let mut groups: BTreeMap<G, (Vec<S>, Vec<bool>)> = BTreeMap::new();
    for (g, s, l) in rows {
        let e = groups.entry(g.clone()).or_default();
        e.0.push(*s);
        e.1.push(*l);
    }
    let mut per_group = BTreeMap::new();
    let mut skipped = Vec::new();
    for (g, (s, l)) in groups {
        if l.contains(&true) {
            per_group.insert(g, average_precision(&s, &l)?);
        } else {
            skipped.push(g);
        }
    }
    if per_group.is_empty() {
        return Err(AsdError::Metric("no group has a positive label".into()));
    }
    let map = per_group.values().sum::<f64>() / per_group.len() as f64;
    Ok(GroupedAp {
        map,
        per_group,
        skipped,
    })
}
