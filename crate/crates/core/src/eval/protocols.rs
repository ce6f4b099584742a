//! 2AFC agreement, reciprocal rank fusion, mean average precision and
//! k-nearest-neighbour voting.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

/// Agreement between a model choice `p_hat ∈ {0, 1}` and the fraction `p`
/// of humans making the same choice: `p·p̂ + (1 − p)(1 − p̂)`.
pub fn two_afc(p: f64, p_hat: bool) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("preference fraction {p} is outside [0, 1]")));
    }
    let q = if p_hat { 1.0 } else { 0.0 };
    Ok(p * q + (1.0 - p) * (1.0 - q))
}

pub fn two_afc_mean(judgements: &[(f64, bool)]) -> Result<f64> {
    if judgements.is_empty() {
        return Err(Error::invalid("no 2AFC judgements"));
    }
    let mut total = 0.0;
    for &(p, c) in judgements {
        total += two_afc(p, c)?;
    }
    Ok(total / judgements.len() as f64)
}

/// Fuses per-subject rankings (each a list of item ids, best first; rank 1
/// is the first entry) into one ranking by `Σ_k 1 / (γ + r_k(x))`.
///
/// Returns `(item, fused score)` in descending score order, ties broken by
/// smaller item id.
pub fn rrf(rankings: &[Vec<usize>], gamma: f64) -> Result<Vec<(usize, f64)>> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::invalid("γ must be positive"));
    }
    let first = rankings.first().ok_or_else(|| Error::invalid("no rankings to fuse"))?;
    let items: BTreeSet<usize> = first.iter().copied().collect();
    if items.len() != first.len() {
        return Err(Error::invalid("a ranking lists the same item twice"));
    }
    let mut score: BTreeMap<usize, f64> = items.iter().map(|&i| (i, 0.0)).collect();
    for (k, r) in rankings.iter().enumerate() {
        let set: BTreeSet<usize> = r.iter().copied().collect();
        if set != items || r.len() != first.len() {
            return Err(Error::invalid(format!("ranking {k} does not rank the same items as ranking 0")));
        }
        for (pos, item) in r.iter().enumerate() {
            *score.get_mut(item).expect("same item set") += 1.0 / (gamma + (pos + 1) as f64);
        }
    }
    let mut fused: Vec<(usize, f64)> = score.into_iter().collect();
    fused.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(fused)
}

/// Mean over queries of average precision. Each query is a retrieved list
/// of relevance flags (best first) and the number `K` of relevant items in
/// the collection; relevant items missing from the list contribute zero.
pub fn map_score(queries: &[(Vec<bool>, usize)]) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::invalid("no queries"));
    }
    let mut total = 0.0;
    for (q, (list, k)) in queries.iter().enumerate() {
        if *k == 0 {
            return Err(Error::invalid(format!("query {q} has no relevant items")));
        }
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (i, &rel) in list.iter().enumerate() {
            if rel {
                hits += 1;
                ap += hits as f64 / (i + 1) as f64;
            }
        }
        if hits > *k {
            return Err(Error::invalid(format!("query {q} retrieves {hits} relevant items but declares {k}")));
        }
        total += ap / *k as f64;
    }
    Ok(total / queries.len() as f64)
}

/// Majority label among the `k` nearest of `(distance, label)` candidates.
/// A tie goes to the label whose tied neighbours have the smaller mean
/// distance, then to the smaller label.
pub fn knn_classify<L: Ord + Clone>(candidates: &[(f64, L)], k: usize) -> Result<L> {
    if candidates.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if candidates.iter().any(|(d, _)| !d.is_finite()) {
        return Err(Error::invalid("distances must be finite"));
    }
    let mut order: Vec<&(f64, L)> = candidates.iter().collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    let mut votes: BTreeMap<&L, (usize, f64)> = BTreeMap::new();
    for (d, l) in order.into_iter().take(k) {
        let e = votes.entry(l).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += d;
    }
    let best = votes
        .into_iter()
        .min_by(|(la, (na, sa)), (lb, (nb, sb))| {
            nb.cmp(na)
                .then((sa / *na as f64).total_cmp(&(sb / *nb as f64)))
                .then(la.cmp(lb))
        })
        .expect("at least one vote");
    Ok(best.0.clone())
}
