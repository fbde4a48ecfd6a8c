//! Frame Fusion Adapter: temporal cross-attention run in parallel with each
//! frozen spatial self-attention block of the vision tower.
//!
//! For frame `m` in block `b`, the fused token map is
//! `SA(F_m, F_m) + alpha_b * CA(F_{m-1}, F_m)`, where the cross-attention
//! query comes from the previous frame and keys/values from the current
//! one. The first frame attends to itself.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::numerics::{Graph, ParameterSet, Tensor, Var};

/// Depth and head layout of the adapter stack. Parameters live in a
/// [`ParameterSet`] under `ffa.{b}.wq`, `ffa.{b}.wk`, `ffa.{b}.wv`, `ffa.{b}.alpha`.
#[derive(Clone, Debug, PartialEq)]
pub struct FfaStack {
    /// Number of vision blocks, counted from the shallowest, that carry an adapter.
    pub attach_depth: usize,
    pub heads: usize,
    pub width: usize,
}

/// One adapter's weights as plain tensors.
#[derive(Clone, Debug)]
pub struct FfaLayer {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub alpha: f64,
    pub heads: usize,
}

pub const INIT_STD: f64 = 0.02;

pub fn param_name(block: usize, role: &str) -> String {
    format!("ffa.{block}.{role}")
}

impl FfaStack {
    pub fn new(attach_depth: usize, heads: usize, width: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "width {width} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            attach_depth,
            heads,
            width,
        })
    }

    pub fn check_depth(&self, vision_layers: usize) -> Result<()> {
        if self.attach_depth > vision_layers {
            return Err(Error::Config(format!(
                "attach depth {} exceeds vision depth {vision_layers}",
                self.attach_depth
            )));
        }
        Ok(())
    }

    /// Projections drawn from N(0, 0.02²); every alpha starts at zero.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParameterSet {
        let mut set = ParameterSet::new();
        let o = self.width;
        for b in 0..self.attach_depth {
            for role in ["wq", "wk", "wv"] {
                set.insert(param_name(b, role), Tensor::randn(&[o, o], INIT_STD, rng))
                    .expect("fresh names");
            }
            set.insert(param_name(b, "alpha"), Tensor::scalar(0.0))
                .expect("fresh names");
        }
        set
    }

    pub fn layer(&self, params: &ParameterSet, block: usize) -> Result<FfaLayer> {
        Ok(FfaLayer {
            wq: params.get(&param_name(block, "wq"))?.clone(),
            wk: params.get(&param_name(block, "wk"))?.clone(),
            wv: params.get(&param_name(block, "wv"))?.clone(),
            alpha: params.get(&param_name(block, "alpha"))?.data()[0],
            heads: self.heads,
        })
    }
}

/// Index of the previous frame's row for every row of a `[videos·M·L, O]`
/// token matrix. Frame 0 maps to itself.
pub fn previous_frame_rows(videos: usize, frames: usize, tokens: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(videos * frames * tokens);
    for v in 0..videos {
        for m in 0..frames {
            let src = if m == 0 { 0 } else { m - 1 };
            for t in 0..tokens {
                idx.push((v * frames + src) * tokens + t);
            }
        }
    }
    idx
}

/// Grouped cross-attention: `prev` supplies queries, `cur` keys and values.
/// Each group is one frame pair of `tokens` rows.
pub fn cross_attend_graph(
    g: &mut Graph,
    weights: [Var; 3],
    prev: Var,
    cur: Var,
    groups: usize,
    heads: usize,
) -> Result<Var> {
    if g.value(prev).shape() != g.value(cur).shape() {
        return Err(dim_err!(
            "cross_attend: token maps {:?} and {:?} differ",
            g.value(prev).shape(),
            g.value(cur).shape()
        ));
    }
    let [wq, wk, wv] = weights;
    g.multi_head_attention(prev, cur, wq, wk, wv, heads, groups, false)
}

/// `sa + alpha * ca`.
pub fn fuse_graph(g: &mut Graph, sa: Var, ca: Var, alpha: Var) -> Result<Var> {
    let scaled = g.scale_by(ca, alpha)?;
    g.add(sa, scaled)
}

impl FfaLayer {
    fn bind(&self, g: &mut Graph) -> [Var; 3] {
        [
            g.constant(self.wq.clone()),
            g.constant(self.wk.clone()),
            g.constant(self.wv.clone()),
        ]
    }

    /// `CA(F_prev, F_cur)` for one frame pair of `[(P+1), O]` token maps.
    pub fn cross_attend(&self, f_prev: &Tensor, f_cur: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let w = self.bind(&mut g);
        let p = g.constant(f_prev.clone());
        let c = g.constant(f_cur.clone());
        let out = cross_attend_graph(&mut g, w, p, c, 1, self.heads)?;
        Ok(g.value(out).clone())
    }

    /// Head-averaged attention matrix `A^ca` of [`FfaLayer::cross_attend`].
    pub fn cross_attention_matrix(&self, f_prev: &Tensor, f_cur: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let w = self.bind(&mut g);
        let p = g.constant(f_prev.clone());
        let c = g.constant(f_cur.clone());
        let out = cross_attend_graph(&mut g, w, p, c, 1, self.heads)?;
        let (probs, shape) = g.attention_probs(out).expect("attention node");
        Ok(head_average(probs, shape.heads, shape.q_len, shape.kv_len, 0))
    }

    /// `sa_out + alpha * ca_out`.
    pub fn fuse_frame(&self, sa_out: &Tensor, ca_out: &Tensor) -> Result<Tensor> {
        if sa_out.shape() != ca_out.shape() {
            return Err(dim_err!("fuse_frame: shapes differ"));
        }
        let data = sa_out
            .data()
            .iter()
            .zip(ca_out.data())
            .map(|(s, c)| s + self.alpha * c)
            .collect();
        Tensor::new(sa_out.shape().to_vec(), data)
    }
}

/// Mean over heads of one group's `[h, Lq, Lk]` attention block.
pub fn head_average(probs: &[f64], heads: usize, lq: usize, lk: usize, group: usize) -> Tensor {
    let mut out = vec![0.0; lq * lk];
    for h in 0..heads {
        let base = (group * heads + h) * lq * lk;
        for (o, p) in out.iter_mut().zip(&probs[base..base + lq * lk]) {
            *o += p / heads as f64;
        }
    }
    Tensor::new(vec![lq, lk], out).expect("non-empty attention block")
}
