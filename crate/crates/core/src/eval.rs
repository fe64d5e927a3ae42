//! Offline retrieval metrics: HitRate@K over test cases, and Precision,
//! Recall and F1 @K macro-averaged over users.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::examples::TestCase;
use crate::error::{Error, Result};
use crate::recommend::Recommender;

pub const AVERAGING: &str = "precision, recall and f1 are per-user means (each user weighted once; a user's cases are averaged first); hit_rate is over cases";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user_id: String,
    pub cases: usize,
    pub hit_rate: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub averaging: String,
    /// Number of test cases.
    pub cases: usize,
    pub users: usize,
    pub hit_rate: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_user: Vec<UserMetrics>,
}

fn hits<S: AsRef<str>>(p: &[S], g: &[S]) -> usize {
    let g: HashSet<&str> = g.iter().map(AsRef::as_ref).collect();
    let p: HashSet<&str> = p.iter().map(AsRef::as_ref).collect();
    p.intersection(&g).count()
}

fn check_len(len: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    if len > k {
        return Err(Error::InvalidArgument(format!("{len} recommendations exceed K={k}")));
    }
    Ok(())
}

/// Share of cases whose recommendations contain at least one ground-truth
/// item. Each case is `(recommended, ground_truth)`.
pub fn hit_rate_at_k<S: AsRef<str>>(cases: &[(Vec<S>, Vec<S>)], k: usize) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::InvalidArgument("hit rate over zero cases".into()));
    }
    let mut n_hit = 0usize;
    for (p, g) in cases {
        check_len(p.len(), k)?;
        if hits(p, g) > 0 {
            n_hit += 1;
        }
    }
    Ok(n_hit as f64 / cases.len() as f64)
}

pub fn precision_recall_f1_at_k<S: AsRef<str>>(p: &[S], g: &[S], k: usize) -> Result<Prf> {
    check_len(p.len(), k)?;
    if g.is_empty() {
        return Err(Error::InvalidArgument("empty ground truth".into()));
    }
    let n = hits(p, g) as f64;
    let g_len = g.iter().map(AsRef::as_ref).collect::<HashSet<&str>>().len() as f64;
    let precision = n / k as f64;
    let recall = n / g_len;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Prf { precision, recall, f1 })
}

/// One case's ranked recommendations, ground truth and owner.
#[derive(Clone, Debug)]
pub struct Ranked<'a> {
    pub user_id: &'a str,
    pub recommended: Vec<String>,
    pub ground_truth: &'a [String],
}

/// Builds the report for cutoff `k`; each ranking is truncated to `k`.
pub fn report(k: usize, ranked: &[Ranked<'_>]) -> Result<EvalReport> {
    if ranked.is_empty() {
        return Err(Error::InvalidArgument("no test cases".into()));
    }
    let mut by_user: BTreeMap<&str, Vec<(bool, Prf)>> = BTreeMap::new();
    let mut pairs = Vec::with_capacity(ranked.len());
    for r in ranked {
        let p = &r.recommended[..r.recommended.len().min(k)];
        let prf = precision_recall_f1_at_k(p, r.ground_truth, k)?;
        by_user.entry(r.user_id).or_default().push((hits(p, r.ground_truth) > 0, prf));
        pairs.push((p.to_vec(), r.ground_truth.to_vec()));
    }
    let hit_rate = hit_rate_at_k(&pairs, k)?;

    let per_user: Vec<UserMetrics> = by_user
        .into_iter()
        .map(|(user, cases)| {
            let n = cases.len() as f64;
            let mean = |f: fn(&(bool, Prf)) -> f64| cases.iter().map(f).sum::<f64>() / n;
            UserMetrics {
                user_id: user.to_string(),
                cases: cases.len(),
                hit_rate: mean(|c| f64::from(u8::from(c.0))),
                precision: mean(|c| c.1.precision),
                recall: mean(|c| c.1.recall),
                f1: mean(|c| c.1.f1),
            }
        })
        .collect();
    let users = per_user.len() as f64;
    let mean = |f: fn(&UserMetrics) -> f64| per_user.iter().map(f).sum::<f64>() / users;
    Ok(EvalReport {
        k,
        averaging: AVERAGING.to_string(),
        cases: ranked.len(),
        users: per_user.len(),
        hit_rate,
        precision: mean(|u| u.precision),
        recall: mean(|u| u.recall),
        f1: mean(|u| u.f1),
        per_user,
    })
}

/// Ranks every test case once at the largest cutoff and reports each `k`
/// on the nested prefixes.
pub fn evaluate(rec: &Recommender, cases: &[TestCase], ks: &[usize]) -> Result<Vec<EvalReport>> {
    let max_k = ks
        .iter()
        .copied()
        .max()
        .ok_or_else(|| Error::InvalidArgument("no cutoffs given".into()))?;
    let ranked: Vec<Ranked<'_>> = cases
        .par_iter()
        .map(|c| {
            let items = rec.rank(&c.user_id, &c.profile, &c.prefix, &c.long_term, max_k)?;
            Ok(Ranked {
                user_id: &c.user_id,
                recommended: items.into_iter().map(|s| s.item_id).collect(),
                ground_truth: &c.ground_truth,
            })
        })
        .collect::<Result<_>>()?;
    ks.iter().map(|&k| report(k, &ranked)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn counting_examples() {
        let cases = vec![
            (s(&["a"]), s(&["a"])),
            (s(&["b", "c"]), s(&["c"])),
            (s(&["d"]), s(&["d", "e"])),
            (s(&["x"]), s(&["y"])),
        ];
        assert_eq!(hit_rate_at_k(&cases, 2).unwrap(), 0.75);
        assert_eq!(hit_rate_at_k(&cases[3..], 2).unwrap(), 0.0);
        assert!(hit_rate_at_k::<String>(&[], 2).is_err());
        assert!(hit_rate_at_k(&cases, 1).is_err());
    }

    #[test]
    fn formula_examples() {
        let p: Vec<String> = (0..20).map(|i| format!("p{i}")).collect();
        let mut g: Vec<String> = (0..6).map(|i| format!("g{i}")).collect();
        g.extend(s(&["p3", "p9"]));
        let m = precision_recall_f1_at_k(&p, &g, 20).unwrap();
        assert_eq!((m.precision, m.recall), (0.1, 0.25));
        assert!((m.f1 - 1.0 / 7.0).abs() < 1e-15);

        let g = s(&["a", "b", "c"]);
        let m = precision_recall_f1_at_k(&g, &g, 3).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        let m = precision_recall_f1_at_k(&s(&["x"]), &g, 3).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        assert!(precision_recall_f1_at_k(&g, &[], 3).is_err());
    }

    #[test]
    fn macro_average_weights_users_once() {
        let (g1, g2) = (s(&["a"]), s(&["b", "c"]));
        let ranked = vec![
            Ranked {
                user_id: "u1",
                recommended: s(&["a", "z"]),
                ground_truth: &g1,
            },
            Ranked {
                user_id: "u1",
                recommended: s(&["y", "z"]),
                ground_truth: &g1,
            },
            Ranked {
                user_id: "u2",
                recommended: s(&["b", "z"]),
                ground_truth: &g2,
            },
        ];
        let r = report(2, &ranked).unwrap();
        assert_eq!((r.cases, r.users), (3, 2));
        assert!((r.hit_rate - 2.0 / 3.0).abs() < 1e-15);
        // u1: precision (0.5 + 0) / 2, u2: 0.5
        assert!((r.precision - 0.375).abs() < 1e-15);
        assert!((r.recall - 0.5).abs() < 1e-15);
        let f1_u1 = (2.0 * 0.5 / 1.5) / 2.0;
        let f1_u2 = 2.0 * 0.5 * 0.5 / 1.0;
        assert!((r.f1 - (f1_u1 + f1_u2) / 2.0).abs() < 1e-15);
        let k1 = report(1, &ranked).unwrap();
        assert!(k1.hit_rate <= r.hit_rate);
    }

    #[test]
    fn perfect_rankings_recall_is_capped_by_k() {
        let g: Vec<String> = (0..8).map(|i| format!("g{i}")).collect();
        let ranked = vec![Ranked {
            user_id: "u",
            recommended: g.clone(),
            ground_truth: &g,
        }];
        assert_eq!(report(5, &ranked).unwrap().recall, 5.0 / 8.0);
        assert_eq!(report(20, &ranked).unwrap().recall, 1.0);
    }
}
