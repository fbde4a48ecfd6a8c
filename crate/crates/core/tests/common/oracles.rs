//! Naive reference implementations of the retrieval metrics.

/// Rank by pairwise comparison: one plus the number of items that beat the
/// target, where equal scores go to the lower index.
pub fn naive_rank(scores: &[f64], target: usize) -> usize {
    let mut beaten_by = 0;
    for (i, &s) in scores.iter().enumerate() {
        if i == target {
            continue;
        }
        if s > scores[target] || (s == scores[target] && i < target) {
            beaten_by += 1;
        }
    }
    beaten_by + 1
}

pub fn naive_recall(ranks: &[usize], k: usize) -> f64 {
    let mut hits = 0.0;
    for &r in ranks {
        if r <= k {
            hits += 1.0;
        }
    }
    hits * 100.0 / ranks.len() as f64
}

pub fn naive_median(ranks: &[usize]) -> f64 {
    // selection by counting, no sort
    let n = ranks.len();
    let kth = |k: usize| -> f64 {
        for &c in ranks {
            let below = ranks.iter().filter(|&&r| r < c).count();
            let equal = ranks.iter().filter(|&&r| r == c).count();
            if below <= k && k < below + equal {
                return c as f64;
            }
        }
        unreachable!()
    };
    if n % 2 == 1 {
        kth(n / 2)
    } else {
        (kth(n / 2 - 1) + kth(n / 2)) / 2.0
    }
}

pub fn naive_cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}
