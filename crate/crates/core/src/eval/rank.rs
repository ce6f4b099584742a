//! Pearson, Spearman (average ranks) and Kendall τ-b.
//!
//! Rank statistics are computed from exact integer counts so that any
//! algorithm producing the same counts yields bit-identical coefficients.

use std::cmp::Ordering;

use crate::error::{Error, Result};

fn check(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("score lengths {} and {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::invalid("correlation needs at least two points"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::invalid("scores must be finite"));
    }
    Ok(())
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    check(a, b)?;
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::invalid("correlation of a constant vector is undefined"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

fn cmp(a: f64, b: f64) -> Ordering {
    a.partial_cmp(&b).expect("finite scores")
}

/// 1-based ranks with ties given the mean of the ranks they span.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    doubled_ranks(v).into_iter().map(|r| r as f64 / 2.0).collect()
}

/// Twice the average rank, an integer.
fn doubled_ranks(v: &[f64]) -> Vec<i64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| cmp(v[i], v[j]));
    let mut ranks = vec![0i64; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && v[idx[end]] == v[idx[start]] {
            end += 1;
        }
        // ranks start+1 ..= end, mean doubled = start + 1 + end
        let r = (start + 1 + end) as i64;
        for &i in &idx[start..end] {
            ranks[i] = r;
        }
        start = end;
    }
    ranks
}

/// Pearson correlation of two integer vectors from exact integer sums.
pub(crate) fn pearson_exact(x: &[i64], y: &[i64]) -> Result<f64> {
    let n = x.len() as i128;
    let (sx, sy): (i128, i128) = (x.iter().map(|&v| v as i128).sum(), y.iter().map(|&v| v as i128).sum());
    let sxx: i128 = x.iter().map(|&v| (v as i128) * (v as i128)).sum();
    let syy: i128 = y.iter().map(|&v| (v as i128) * (v as i128)).sum();
    let sxy: i128 = x.iter().zip(y).map(|(&a, &b)| (a as i128) * (b as i128)).sum();
    let num = n * sxy - sx * sy;
    let dx = n * sxx - sx * sx;
    let dy = n * syy - sy * sy;
    if dx == 0 || dy == 0 {
        return Err(Error::invalid("rank correlation of a constant vector is undefined"));
    }
    Ok((num as f64 / (dx as f64 * dy as f64).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman correlation: Pearson on average ranks.
pub fn srcc(a: &[f64], b: &[f64]) -> Result<f64> {
    check(a, b)?;
    pearson_exact(&doubled_ranks(a), &doubled_ranks(b))
}

/// `Σ t(t − 1)/2` over runs of equal values in sorted order.
fn tie_pairs<T: PartialEq>(sorted: &[T]) -> i64 {
    let mut total = 0i64;
    let mut start = 0;
    while start < sorted.len() {
        let mut end = start + 1;
        while end < sorted.len() && sorted[end] == sorted[start] {
            end += 1;
        }
        let t = (end - start) as i64;
        total += t * (t - 1) / 2;
        start = end;
    }
    total
}

/// Sorts `v` and returns the number of inversions it contained.
fn merge_count(v: &mut [f64], buf: &mut Vec<f64>) -> i64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid], buf) + merge_count(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf.push(v[j]);
            swaps += (mid - i) as i64;
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    swaps
}

/// `(n_c − n_d, n_0, n_1, n_2)` by Knight's O(n log n) method.
fn kendall_counts(a: &[f64], b: &[f64]) -> (i64, i64, i64, i64) {
    let n = a.len() as i64;
    let n0 = n * (n - 1) / 2;
    let mut idx: Vec<usize> = (0..a.len()).collect();
    idx.sort_by(|&i, &j| cmp(a[i], a[j]).then(cmp(b[i], b[j])));
    let sa: Vec<f64> = idx.iter().map(|&i| a[i]).collect();
    let pairs: Vec<(f64, f64)> = idx.iter().map(|&i| (a[i], b[i])).collect();
    let n1 = tie_pairs(&sa);
    let n3 = tie_pairs(&pairs);
    let mut sb: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
    let mut buf = Vec::with_capacity(sb.len());
    let swaps = merge_count(&mut sb, &mut buf);
    let n2 = tie_pairs(&sb);
    (n0 - n1 - n2 + n3 - 2 * swaps, n0, n1, n2)
}

/// Final τ-b formula shared with any other way of counting pairs.
pub(crate) fn tau_b(s: i64, n0: i64, n1: i64, n2: i64) -> Result<f64> {
    let (da, db) = (n0 - n1, n0 - n2);
    if da == 0 || db == 0 {
        return Err(Error::invalid("rank correlation of a constant vector is undefined"));
    }
    Ok((s as f64 / (da as f64 * db as f64).sqrt()).clamp(-1.0, 1.0))
}

/// Kendall τ-b, which discounts tied pairs in either vector.
pub fn krcc(a: &[f64], b: &[f64]) -> Result<f64> {
    check(a, b)?;
    let (s, n0, n1, n2) = kendall_counts(a, b);
    tau_b(s, n0, n1, n2)
}
