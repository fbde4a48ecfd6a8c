//! Contrastive objectives on L2-normalized features.
//!
//! `t2v` is the row-wise softmax over videos, `v2t` the column-wise softmax
//! over queries. The cross-task loss is a `t2v` loss whose denominator also
//! sums over cached reference features from earlier tasks.

use crate::error::{dim_err, Error, Result};
use crate::numerics::{Graph, Tensor, Var};

pub const DEFAULT_TAU: f64 = 0.05;
pub const DEFAULT_BETA: f64 = 0.6;

/// Query features, their matched videos and optional reference negatives.
#[derive(Clone, Debug)]
pub struct SimilarityBatch {
    pub q: Tensor,
    pub v: Tensor,
    pub refs: Option<Tensor>,
    pub tau: f64,
}

fn check_tau(tau: f64) -> Result<()> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

pub fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("beta must lie in [0, 1], got {beta}")));
    }
    Ok(())
}

/// `norm(a)·norm(b)ᵀ / tau`.
pub fn similarity_graph(g: &mut Graph, a: Var, b: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let an = g.normalize_rows(a)?;
    let bn = g.normalize_rows(b)?;
    let s = g.matmul_bt(an, bn)?;
    g.scale(s, 1.0 / tau)
}

fn diagonal_targets(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn check_pairs(g: &Graph, q: Var, v: Var) -> Result<usize> {
    let (nq, wq) = g.value(q).as_matrix();
    let (nv, wv) = g.value(v).as_matrix();
    if nq != nv || wq != wv {
        return Err(dim_err!("query batch {nq}x{wq} does not pair with video batch {nv}x{wv}"));
    }
    Ok(nq)
}

/// Returns `(L_v2t, L_t2v)`.
pub fn infonce_graph(g: &mut Graph, q: Var, v: Var, tau: f64) -> Result<(Var, Var)> {
    let n = check_pairs(g, q, v)?;
    let s = similarity_graph(g, q, v, tau)?;
    let t2v = g.cross_entropy(s, diagonal_targets(n))?;
    let st = g.transpose(s)?;
    let v2t = g.cross_entropy(st, diagonal_targets(n))?;
    Ok((v2t, t2v))
}

/// Cross-task loss; `refs == None` reduces to `L_t2v`.
pub fn ct_graph(g: &mut Graph, q: Var, v: Var, refs: Option<Var>, tau: f64) -> Result<Var> {
    let n = check_pairs(g, q, v)?;
    let mut logits = similarity_graph(g, q, v, tau)?;
    if let Some(r) = refs {
        let extra = similarity_graph(g, q, r, tau)?;
        logits = g.concat_cols(logits, extra)?;
    }
    g.cross_entropy(logits, diagonal_targets(n))
}

/// `(1−β)·½(L_v2t + L_t2v) + β·L_CT`. Terms with a zero weight are not built,
/// so `beta == 0` never reads the references.
pub fn total_graph(g: &mut Graph, q: Var, v: Var, refs: Option<Var>, tau: f64, beta: f64) -> Result<Var> {
    check_beta(beta)?;
    let sym = if beta < 1.0 {
        let (v2t, t2v) = infonce_graph(g, q, v, tau)?;
        let s = g.add(v2t, t2v)?;
        Some(g.scale(s, (1.0 - beta) * 0.5)?)
    } else {
        None
    };
    let ct = if beta > 0.0 {
        let c = ct_graph(g, q, v, refs, tau)?;
        Some(g.scale(c, beta)?)
    } else {
        None
    };
    match (sym, ct) {
        (Some(a), Some(b)) => g.add(a, b),
        (Some(a), None) => Ok(a),
        (None, Some(b)) => Ok(b),
        (None, None) => unreachable!("beta lies in [0, 1]"),
    }
}

struct Bound {
    g: Graph,
    q: Var,
    v: Var,
    refs: Option<Var>,
}

impl SimilarityBatch {
    fn bind(&self) -> Result<Bound> {
        if self.q.as_matrix().0 == 0 {
            return Err(dim_err!("empty batch"));
        }
        let mut g = Graph::new();
        let q = g.constant(self.q.clone());
        let v = g.constant(self.v.clone());
        let refs = self.refs.as_ref().map(|r| g.constant(r.clone()));
        Ok(Bound { g, q, v, refs })
    }
}

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).data()[0]
}

/// `(L_v2t, L_t2v)` for a batch.
pub fn infonce_pair(batch: &SimilarityBatch) -> Result<(f64, f64)> {
    let mut b = batch.bind()?;
    let (v2t, t2v) = infonce_graph(&mut b.g, b.q, b.v, batch.tau)?;
    Ok((scalar(&b.g, v2t), scalar(&b.g, t2v)))
}

pub fn ct_loss(batch: &SimilarityBatch) -> Result<f64> {
    let mut b = batch.bind()?;
    let out = ct_graph(&mut b.g, b.q, b.v, b.refs, batch.tau)?;
    Ok(scalar(&b.g, out))
}

pub fn total_loss(batch: &SimilarityBatch, beta: f64) -> Result<f64> {
    let mut b = batch.bind()?;
    let out = total_graph(&mut b.g, b.q, b.v, b.refs, batch.tau, beta)?;
    Ok(scalar(&b.g, out))
}

/// Mixes precomputed components the same way [`total_loss`] does.
pub fn mix(v2t: f64, t2v: f64, ct: f64, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    Ok((1.0 - beta) * 0.5 * (v2t + t2v) + beta * ct)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(n: usize, seed: u64) -> SimilarityBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SimilarityBatch {
            q: Tensor::randn(&[n, 6], 1.0, &mut rng),
            v: Tensor::randn(&[n, 6], 1.0, &mut rng),
            refs: None,
            tau: DEFAULT_TAU,
        }
    }

    #[test]
    fn single_pair_is_zero() {
        let (a, b) = infonce_pair(&batch(1, 1)).unwrap();
        assert_eq!((a, b), (0.0, 0.0));
    }

    #[test]
    fn uniform_similarities_give_ln_n() {
        let ones = Tensor::full(&[4, 3], 1.0);
        let b = SimilarityBatch {
            q: ones.clone(),
            v: ones,
            refs: None,
            tau: DEFAULT_TAU,
        };
        let (v2t, t2v) = infonce_pair(&b).unwrap();
        assert!((v2t - 4f64.ln()).abs() < 1e-9);
        assert!((t2v - 4f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn symmetric_similarity_gives_equal_directions() {
        let b = batch(5, 2);
        let same = SimilarityBatch {
            q: b.q.clone(),
            v: b.q.clone(),
            refs: None,
            tau: 0.3,
        };
        let (v2t, t2v) = infonce_pair(&same).unwrap();
        assert!((v2t - t2v).abs() < 1e-12);
    }

    #[test]
    fn ct_reduces_and_grows() {
        let mut b = batch(4, 3);
        let (_, t2v) = infonce_pair(&b).unwrap();
        assert_eq!(ct_loss(&b).unwrap(), t2v);
        b.refs = Some(Tensor::randn(&[3, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(4)));
        assert!(ct_loss(&b).unwrap() > t2v);
    }

    #[test]
    fn opposite_reference_is_negligible() {
        let mut b = batch(3, 5);
        let row = b.q.row(0).to_vec();
        b.q = Tensor::from_rows(&[row.clone(), row.clone(), row.clone()]).unwrap();
        let base = ct_loss(&b).unwrap();
        let anti: Vec<f64> = row.iter().map(|x| -x).collect();
        b.refs = Some(Tensor::new(vec![1, 6], anti).unwrap());
        let with = ct_loss(&b).unwrap();
        assert!(with > base);
        assert!(with - base < 1e-9);
    }

    #[test]
    fn beta_mixing() {
        assert!((mix(1.0, 2.0, 3.0, 0.6).unwrap() - 2.4).abs() < 1e-12);
        let mut b = batch(4, 6);
        b.refs = Some(Tensor::randn(&[2, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(7)));
        let (v2t, t2v) = infonce_pair(&b).unwrap();
        let ct = ct_loss(&b).unwrap();
        assert_eq!(total_loss(&b, 0.0).unwrap(), 0.5 * (v2t + t2v));
        assert_eq!(total_loss(&b, 1.0).unwrap(), ct);
        assert!(matches!(total_loss(&b, 1.5), Err(Error::Config(_))));
        b.tau = 0.0;
        assert!(matches!(infonce_pair(&b), Err(Error::Config(_))));
    }
}
