use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Cohen's kappa between two raters over the same items.
///
/// Returns 1.0 in the degenerate case where both raters used one and the
/// same category throughout (chance agreement is 1).
pub fn cohen_kappa<T: Ord>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::validation(format!(
            "label lists differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::validation("label lists are empty"));
    }
    let n = a.len() as f64;
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64;
    let mut marginals: BTreeMap<&T, (u64, u64)> = BTreeMap::new();
    for x in a {
        marginals.entry(x).or_default().0 += 1;
    }
    for y in b {
        marginals.entry(y).or_default().1 += 1;
    }
    let p_o = agree / n;
    let p_e: f64 = marginals
        .values()
        .map(|&(ca, cb)| (ca as f64 / n) * (cb as f64 / n))
        .sum();
    if p_e >= 1.0 {
        return Ok(if p_o >= 1.0 { 1.0 } else { 0.0 });
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Fleiss' kappa for a fixed number of raters per item.
///
/// `ratings[i]` holds every rater's label for item `i`; all items must have
/// the same number of ratings, at least two.
pub fn fleiss_kappa<T: Ord>(ratings: &[Vec<T>]) -> Result<f64> {
    let first = ratings
        .first()
        .ok_or_else(|| Error::validation("no items to rate"))?;
    let raters = first.len();
    if raters < 2 {
        return Err(Error::validation(
            "Fleiss' kappa needs at least two raters per item",
        ));
    }
    if let Some(i) = ratings.iter().position(|r| r.len() != raters) {
        return Err(Error::validation(format!(
            "item {i} has {} ratings, expected {raters}",
            ratings[i].len()
        )));
    }
    let n_items = ratings.len() as f64;
    let r = raters as f64;
    let mut totals: BTreeMap<&T, u64> = BTreeMap::new();
    let mut p_bar = 0.0;
    for item in ratings {
        let mut counts: BTreeMap<&T, u64> = BTreeMap::new();
        for label in item {
            *counts.entry(label).or_default() += 1;
            *totals.entry(label).or_default() += 1;
        }
        let pairs: f64 = counts
            .values()
            .map(|&c| (c * c.saturating_sub(1)) as f64)
            .sum();
        p_bar += pairs / (r * (r - 1.0));
    }
    p_bar /= n_items;
    let p_e: f64 = totals
        .values()
        .map(|&c| {
            let p = c as f64 / (n_items * r);
            p * p
        })
        .sum();
    if p_e >= 1.0 {
        return Ok(1.0);
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}
