//! Retrieval and continual-learning metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::{dot, Tensor, NORM_FLOOR};

/// Cosine similarity; a zero-norm side gives 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na < NORM_FLOOR || nb < NORM_FLOOR {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Sorts indices by descending score, ties by ascending index.
pub fn argsort_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Pool indices ordered by descending cosine similarity to `q`.
pub fn rank_videos(q: &[f64], pool: &Tensor) -> Result<Vec<usize>> {
    let (n, w) = pool.as_matrix();
    if q.len() != w {
        return Err(dim_err!("query width {} != pool width {w}", q.len()));
    }
    let scores: Vec<f64> = (0..n).map(|i| cosine(q, pool.row(i))).collect();
    Ok(argsort_desc(&scores))
}

/// 1-based rank of `target` within `scores` under the ranking order.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > t || (s == t && i < target))
        .count()
}

/// Percentage of ranks within `k`.
pub fn recall_at_k(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    100.0 * hits as f64 / ranks.len() as f64
}

/// `(median, mean)`; an even count takes the mean of the middle two.
pub fn median_mean_rank(ranks: &[usize]) -> Result<(f64, f64)> {
    if ranks.is_empty() {
        return Err(Error::Usage("no ranks to summarise".into()));
    }
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    };
    let mean = sorted.iter().sum::<usize>() as f64 / n as f64;
    Ok((median, mean))
}

/// Lower-triangular matrix of R@1: row `t` holds tasks `1..=t` measured
/// after training task `t`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecallMatrix {
    rows: Vec<Vec<f64>>,
}

impl RecallMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    /// Appends row `t` (1-based) with exactly `t` entries.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::Protocol(format!(
                "row {} needs {} entries, got {}",
                self.rows.len() + 1,
                self.rows.len() + 1,
                row.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    /// `R_{t,i}`, both 1-based.
    pub fn get(&self, t: usize, i: usize) -> Option<f64> {
        self.rows.get(t.checked_sub(1)?)?.get(i.checked_sub(1)?).copied()
    }

    pub fn row(&self, t: usize) -> Option<&[f64]> {
        self.rows.get(t.checked_sub(1)?).map(Vec::as_slice)
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }
}

/// `BWF_t = (1/(t−1)) Σ_{i<t} (R_{i,i} − R_{t,i})`; 0 when `t == 1`.
pub fn backward_forgetting(r: &RecallMatrix, t: usize) -> Result<f64> {
    if t == 0 || t > r.tasks() {
        return Err(Error::Usage(format!("task {t} not in ledger of {} tasks", r.tasks())));
    }
    if t == 1 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 1..t {
        let diag = r.get(i, i).expect("lower-triangular rows");
        let now = r.get(t, i).expect("lower-triangular rows");
        total += diag - now;
    }
    Ok(total / (t - 1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub medr: f64,
    pub meanr: f64,
    pub bwf: f64,
    /// R@1 per task, keyed by 1-based task index.
    pub per_task: BTreeMap<usize, f64>,
    /// Queries or pool entries with a zero-norm feature.
    pub zero_norm: usize,
}

/// Ground-truth ranks plus per-task R@1 from ranks and query task labels.
pub fn summarize(ranks: &[usize], query_tasks: &[usize], bwf: f64, zero_norm: usize) -> Result<MetricsReport> {
    if ranks.len() != query_tasks.len() {
        return Err(dim_err!("{} ranks for {} queries", ranks.len(), query_tasks.len()));
    }
    let (medr, meanr) = median_mean_rank(ranks)?;
    let mut grouped: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (&r, &t) in ranks.iter().zip(query_tasks) {
        grouped.entry(t).or_default().push(r);
    }
    Ok(MetricsReport {
        r1: recall_at_k(ranks, 1),
        r5: recall_at_k(ranks, 5),
        r10: recall_at_k(ranks, 10),
        medr,
        meanr,
        bwf,
        per_task: grouped.into_iter().map(|(t, r)| (t, recall_at_k(&r, 1))).collect(),
        zero_norm,
    })
}

/// Task-matched scores: query feature `q_task_of_video` against each pool
/// row. `conditional[i]` holds the query under prototype `i+1`.
pub fn task_matched_scores(conditional: &[Tensor], pool: &Tensor, pool_tasks: &[u32]) -> Result<Vec<f64>> {
    let (n, _) = pool.as_matrix();
    if pool_tasks.len() != n {
        return Err(dim_err!("{} task labels for {n} pool rows", pool_tasks.len()));
    }
    (0..n)
        .map(|j| {
            let t = pool_tasks[j] as usize;
            let q = conditional
                .get(t.wrapping_sub(1))
                .ok_or_else(|| Error::Protocol(format!("no prototype for stored task {t}")))?;
            Ok(cosine(q.data(), pool.row(j)))
        })
        .collect()
}

/// Scores from the best prototype per pool row.
pub fn max_prototype_scores(conditional: &[Tensor], pool: &Tensor) -> Vec<f64> {
    let (n, _) = pool.as_matrix();
    (0..n)
        .map(|j| {
            conditional
                .iter()
                .map(|q| cosine(q.data(), pool.row(j)))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scoring {
    TaskMatched,
    MaxPrototype,
}

impl std::str::FromStr for Scoring {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "task_matched" => Ok(Scoring::TaskMatched),
            "max_prototype" => Ok(Scoring::MaxPrototype),
            other => Err(Error::Config(format!("unknown scoring mode {other}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_examples() {
        let pool = Tensor::from_rows(&[vec![0.0, 1.0], vec![2.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(rank_videos(&[1.0, 0.0], &pool).unwrap()[0], 1);
        let order = rank_videos(&[-1.0, -1.0], &pool).unwrap();
        // zero vector scores 0 and beats both negative similarities
        assert_eq!(order, vec![2, 0, 1]);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn recall_and_median_examples() {
        assert_eq!(recall_at_k(&[1, 1, 1], 1), 100.0);
        assert_eq!(recall_at_k(&[3], 2), 0.0);
        assert_eq!(median_mean_rank(&[1, 2, 3]).unwrap(), (2.0, 2.0));
        assert_eq!(median_mean_rank(&[1, 3]).unwrap(), (2.0, 2.0));
        assert_eq!(median_mean_rank(&[1, 1, 1, 1]).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn bwf_examples() {
        let r = RecallMatrix::from_rows(vec![vec![20.0], vec![18.0, 30.0]]).unwrap();
        assert_eq!(backward_forgetting(&r, 2).unwrap(), 2.0);
        let r = RecallMatrix::from_rows(vec![vec![20.0], vec![21.0, 30.0]]).unwrap();
        assert_eq!(backward_forgetting(&r, 2).unwrap(), -1.0);
        assert_eq!(backward_forgetting(&r, 1).unwrap(), 0.0);
        let same = RecallMatrix::from_rows(vec![vec![5.0], vec![5.0, 7.0], vec![5.0, 7.0, 1.0]]).unwrap();
        assert_eq!(backward_forgetting(&same, 3).unwrap(), 0.0);
        assert!(RecallMatrix::from_rows(vec![vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn rank_of_matches_argsort() {
        let s = [0.5, 0.9, 0.5, 0.1];
        let order = argsort_desc(&s);
        for t in 0..4 {
            assert_eq!(order.iter().position(|&i| i == t).unwrap() + 1, rank_of(&s, t));
        }
    }
}
