//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and enough saved
//! state to run its vector-Jacobian product. Nodes are created in topological
//! order, so the backward pass is a single reverse sweep over the tape.

use std::collections::BTreeMap;

use super::tensor::{dot, matmul_acc, matmul_at_acc, matmul_bt_acc, softmax_in_place};
use super::{GradMap, ParameterSet, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Zero-norm threshold shared by row normalization here and cosine ranking in `eval`.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    AddTiled(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        probs: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    GroupMean(Var, usize),
    NormalizeRows(Var, Vec<f64>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Transpose(Var),
    ConcatCols(Var, Var),
    Sum(Var),
    TopKSoftmax(Var),
    Column(Var, usize),
    ExpandRows(Var, usize),
    MulCol(Var, Var),
}

/// Geometry of a grouped multi-head attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnShape {
    pub groups: usize,
    pub heads: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub width: usize,
    pub causal: bool,
}

impl AttnShape {
    fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// `√(O/h)` with `O` the full feature width.
    pub fn scale(&self) -> f64 {
        ((self.width / self.heads) as f64).sqrt()
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{op:?}")));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
            .expect("constant inputs must be finite")
    }

    /// Leaf input whose gradient is retained after [`Graph::backward`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true).expect("leaf inputs must be finite")
    }

    /// Registers a named parameter once; later calls with the same name
    /// return the cached node.
    pub fn param(&mut self, name: &str, t: &Tensor, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self
            .push(t.clone(), Op::Param, trainable)
            .expect("parameters must be finite");
        self.params.insert(name.to_string(), v);
        v
    }

    /// Registers `name` from `set`, trainable unless frozen there.
    pub fn use_param(&mut self, set: &ParameterSet, name: &str) -> Result<Var> {
        let t = set.get(name)?;
        Ok(self.param(name, t, !set.is_frozen(name)))
    }

    fn mat(&self, v: Var) -> (usize, usize) {
        self.value(v).as_matrix()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(dim_err!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    // ---- forward ops -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a);
        let (k2, n) = self.mat(b);
        if k != k2 {
            return Err(dim_err!("matmul inner extents {k} vs {k2}"));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`, the layout of a linear layer `X·Wᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a);
        let (n, k2) = self.mat(b);
        if k != k2 {
            return Err(dim_err!("matmul_bt inner extents {k} vs {k2}"));
        }
        let mut out = vec![0.0; m * n];
        matmul_bt_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMulBt(a, b), rg)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, "elementwise op")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, out)?, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a).map(|v| v * c);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// Multiplies every entry of `a` by the single-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(dim_err!("scale_by needs a scalar, got {:?}", self.value(s).shape()));
        }
        let c = self.value(s).data()[0];
        let t = self.value(a).map(|v| v * c);
        let rg = self.rg(a) || self.rg(s);
        self.push(t, Op::ScaleBy(a, s), rg)
    }

    /// Adds `tile: [L, n]` to every consecutive block of `L` rows of `x: [R, n]`.
    /// A 1-D `tile` of width `n` broadcasts over all rows.
    pub fn add_tiled(&mut self, x: Var, tile: Var) -> Result<Var> {
        let (r, n) = self.mat(x);
        let (l, n2) = self.mat(tile);
        if n != n2 || r % l != 0 {
            return Err(dim_err!(
                "add_tiled: {:?} cannot tile {:?}",
                self.value(tile).shape(),
                self.value(x).shape()
            ));
        }
        let xd = self.value(x).data();
        let td = self.value(tile).data();
        let out: Vec<f64> = xd
            .iter()
            .enumerate()
            .map(|(i, &v)| v + td[((i / n) % l) * n + i % n])
            .collect();
        let rg = self.rg(x) || self.rg(tile);
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::AddTiled(x, tile), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push(t, Op::Gelu(x), rg)
    }

    /// Standardizes each row over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, n) = self.mat(x);
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(dim_err!("layer_norm affine width must be {n}"));
        }
        if eps <= 0.0 {
            return Err(Error::Config("layer_norm eps must be positive".into()));
        }
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; r * n];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * n];
        for i in 0..r {
            let row = &xd[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let shape = self.value(x).shape().to_vec();
        self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (r, n) = self.mat(x);
        let mut out = self.value(x).data().to_vec();
        for i in 0..r {
            softmax_in_place(&mut out[i * n..(i + 1) * n]);
        }
        let rg = self.rg(x);
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Softmax(x), rg)
    }

    /// Grouped multi-head scaled dot-product attention on already projected
    /// `q: [G·Lq, O]`, `k, v: [G·Lk, O]`. Scores are divided by `√(O/h)`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let (rq, width) = self.mat(q);
        let (rk, wk) = self.mat(k);
        let (rv, wv) = self.mat(v);
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "feature width {width} not divisible by {heads} heads"
            )));
        }
        if wk != width || wv != width || rk != rv {
            return Err(dim_err!("attention: q/k/v widths or k/v rows disagree"));
        }
        if groups == 0 || rq % groups != 0 || rk % groups != 0 {
            return Err(dim_err!("attention: rows not divisible into {groups} groups"));
        }
        let shape = AttnShape {
            groups,
            heads,
            q_len: rq / groups,
            kv_len: rk / groups,
            width,
            causal,
        };
        if causal && shape.q_len != shape.kv_len {
            return Err(dim_err!("causal attention needs equal query and key lengths"));
        }
        let (out, probs) = attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            &shape,
        );
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            Tensor::new(vec![rq, width], out)?,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
            rg,
        )
    }

    /// `softmax((src_q·Wqᵀ)(src_kv·Wkᵀ)ᵀ / √(O/h)) · (src_kv·Wvᵀ)`, heads concatenated.
    #[allow(clippy::too_many_arguments)]
    pub fn multi_head_attention(
        &mut self,
        q_src: Var,
        kv_src: Var,
        wq: Var,
        wk: Var,
        wv: Var,
        heads: usize,
        groups: usize,
        causal: bool,
    ) -> Result<Var> {
        let q = self.matmul_bt(q_src, wq)?;
        let k = self.matmul_bt(kv_src, wk)?;
        let v = self.matmul_bt(kv_src, wv)?;
        self.attention(q, k, v, groups, heads, causal)
    }

    /// Saved attention probabilities `[G, h, Lq, Lk]` of an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<(&[f64], AttnShape)> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, shape, .. } => Some((probs, *shape)),
            _ => None,
        }
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let (r, n) = self.mat(x);
        if idx.is_empty() {
            return Err(dim_err!("gather_rows needs at least one index"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(dim_err!("row {bad} out of range for {r} rows"));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in &idx {
            out.extend_from_slice(&xd[i * n..(i + 1) * n]);
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new(vec![idx.len(), n], out)?,
            Op::GatherRows(x, idx),
            rg,
        )
    }

    /// Mean over each consecutive block of `block` rows.
    pub fn group_mean(&mut self, x: Var, block: usize) -> Result<Var> {
        let (r, n) = self.mat(x);
        if block == 0 || r % block != 0 {
            return Err(dim_err!("group_mean: {r} rows not divisible by {block}"));
        }
        let xd = self.value(x).data();
        let g = r / block;
        let mut out = vec![0.0; g * n];
        for gi in 0..g {
            for b in 0..block {
                let row = &xd[(gi * block + b) * n..(gi * block + b + 1) * n];
                for (o, &v) in out[gi * n..(gi + 1) * n].iter_mut().zip(row) {
                    *o += v;
                }
            }
            for o in &mut out[gi * n..(gi + 1) * n] {
                *o /= block as f64;
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![g, n], out)?, Op::GroupMean(x, block), rg)
    }

    /// Scales each row to unit L2 norm; rows with norm below [`NORM_FLOOR`] map to zero.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, n) = self.mat(x);
        let xd = self.value(x).data();
        let mut norms = vec![0.0; r];
        let mut out = vec![0.0; r * n];
        for i in 0..r {
            let row = &xd[i * n..(i + 1) * n];
            let norm = dot(row, row).sqrt();
            norms[i] = norm;
            if norm >= NORM_FLOOR {
                for j in 0..n {
                    out[i * n + j] = row[j] / norm;
                }
            }
        }
        let rg = self.rg(x);
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::NormalizeRows(x, norms), rg)
    }

    /// Mean over rows of `logsumexp(row) - row[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        let (r, c) = self.mat(logits);
        if targets.len() != r {
            return Err(dim_err!("cross_entropy: {} targets for {r} rows", targets.len()));
        }
        if targets.iter().any(|&t| t >= c) {
            return Err(dim_err!("cross_entropy target out of range"));
        }
        let xd = self.value(logits).data();
        let mut probs = xd.to_vec();
        let mut loss = 0.0;
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[targets[i]];
            softmax_in_place(&mut probs[i * c..(i + 1) * c]);
        }
        loss /= r as f64;
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            rg,
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose()?;
        let rg = self.rg(x);
        self.push(t, Op::Transpose(x), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.mat(a);
        let (rb, cb) = self.mat(b);
        if ra != rb {
            return Err(dim_err!("concat_cols: {ra} vs {rb} rows"));
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(&ad[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bd[i * cb..(i + 1) * cb]);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![ra, ca + cb], out)?, Op::ConcatCols(a, b), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Per row: keep the `k` largest logits (ties to the lower index), softmax
    /// over the survivors, zero elsewhere.
    pub fn topk_softmax(&mut self, logits: Var, k: usize) -> Result<Var> {
        let (r, e) = self.mat(logits);
        if k == 0 || k > e {
            return Err(Error::Config(format!("top-k with k={k} over {e} experts")));
        }
        let xd = self.value(logits).data();
        let mut out = vec![0.0; r * e];
        for i in 0..r {
            let row = &xd[i * e..(i + 1) * e];
            let keep = top_k_indices(row, k);
            let mut vals: Vec<f64> = keep.iter().map(|&j| row[j]).collect();
            softmax_in_place(&mut vals);
            for (&j, &g) in keep.iter().zip(&vals) {
                out[i * e + j] = g;
            }
        }
        let rg = self.rg(logits);
        let shape = self.value(logits).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::TopKSoftmax(logits), rg)
    }

    /// Column `j` of a matrix as `[R, 1]`.
    pub fn column(&mut self, x: Var, j: usize) -> Result<Var> {
        let (r, c) = self.mat(x);
        if j >= c {
            return Err(dim_err!("column {j} out of range for {c} columns"));
        }
        let xd = self.value(x).data();
        let out = (0..r).map(|i| xd[i * c + j]).collect();
        let rg = self.rg(x);
        self.push(Tensor::new(vec![r, 1], out)?, Op::Column(x, j), rg)
    }

    /// Repeats every row `times` times in place.
    pub fn expand_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let (r, n) = self.mat(x);
        if times == 0 {
            return Err(dim_err!("expand_rows by zero"));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(r * times * n);
        for i in 0..r {
            for _ in 0..times {
                out.extend_from_slice(&xd[i * n..(i + 1) * n]);
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new(vec![r * times, n], out)?,
            Op::ExpandRows(x, times),
            rg,
        )
    }

    /// Multiplies row `i` of `x: [R, n]` by `c[i]` where `c: [R, 1]`.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (r, n) = self.mat(x);
        if self.value(c).shape() != [r, 1] {
            return Err(dim_err!("mul_col expects a [{r}, 1] column"));
        }
        let xd = self.value(x).data();
        let cd = self.value(c).data();
        let out = xd
            .iter()
            .enumerate()
            .map(|(i, &v)| v * cd[i / n])
            .collect();
        let rg = self.rg(x) || self.rg(c);
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::MulCol(x, c), rg)
    }

    // ---- backward ----------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Returns gradients for every
    /// registered trainable parameter (zeros where unreachable). Gradients of
    /// [`Graph::leaf`] inputs are available through [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<GradMap> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let nodes = &self.nodes;
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !nodes[i].requires_grad {
                continue;
            }
            backprop_node(nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for g in grads.iter().flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("backward".into()));
            }
        }
        let mut out = GradMap::new();
        for (name, &v) in &self.params {
            if !self.nodes[v.0].requires_grad {
                continue;
            }
            let shape = self.nodes[v.0].value.shape().to_vec();
            let data = grads[v.0]
                .clone()
                .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.numel()]);
            out.insert(name.clone(), Tensor::new(shape, data)?);
        }
        self.grads = grads;
        Ok(out)
    }

    /// Gradient of a node after [`Graph::backward`], if it received one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Indices of the `k` largest values, ties resolved toward lower indices,
/// returned in ascending index order.
pub(crate) fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    let mut keep = order[..k].to_vec();
    keep.sort_unstable();
    keep
}

fn attention_forward(q: &[f64], k: &[f64], v: &[f64], s: &AttnShape) -> (Vec<f64>, Vec<f64>) {
    let (lq, lk, w, dh) = (s.q_len, s.kv_len, s.width, s.head_dim());
    let scale = s.scale();
    let mut out = vec![0.0; s.groups * lq * w];
    let mut probs = vec![0.0; s.groups * s.heads * lq * lk];
    for g in 0..s.groups {
        for h in 0..s.heads {
            let off = h * dh;
            for i in 0..lq {
                let qrow = &q[(g * lq + i) * w + off..(g * lq + i) * w + off + dh];
                let valid = if s.causal { i + 1 } else { lk };
                let p = &mut probs[((g * s.heads + h) * lq + i) * lk..][..lk];
                for j in 0..valid {
                    let krow = &k[(g * lk + j) * w + off..(g * lk + j) * w + off + dh];
                    p[j] = dot(qrow, krow) / scale;
                }
                softmax_in_place(&mut p[..valid]);
                let orow = &mut out[(g * lq + i) * w + off..(g * lq + i) * w + off + dh];
                for j in 0..valid {
                    let pj = p[j];
                    let vrow = &v[(g * lk + j) * w + off..(g * lk + j) * w + off + dh];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o += pj * vv;
                    }
                }
            }
        }
    }
    (out, probs)
}

fn buf<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop_node(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| nodes[v.0].value.data();
    let mat = |v: Var| nodes[v.0].value.as_matrix();
    match &nodes[i].op {
        Op::Leaf | Op::Param => {}
        Op::MatMul(a, b) => {
            let (m, k) = mat(*a);
            let (_, n) = mat(*b);
            if let Some(da) = buf(nodes, grads, *a) {
                matmul_bt_acc(g, val(*b), m, n, k, da);
            }
            if let Some(db) = buf(nodes, grads, *b) {
                matmul_at_acc(val(*a), g, m, k, n, db);
            }
        }
        Op::MatMulBt(a, b) => {
            let (m, k) = mat(*a);
            let (n, _) = mat(*b);
            if let Some(da) = buf(nodes, grads, *a) {
                matmul_acc(g, val(*b), m, n, k, da);
            }
            if let Some(db) = buf(nodes, grads, *b) {
                matmul_at_acc(g, val(*a), m, n, k, db);
            }
        }
        Op::Add(a, b) => {
            for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                if let Some(d) = buf(nodes, grads, v) {
                    d.iter_mut().zip(g).for_each(|(d, &gv)| *d += sign * gv);
                }
            }
        }
        Op::Sub(a, b) => {
            for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                if let Some(d) = buf(nodes, grads, v) {
                    d.iter_mut().zip(g).for_each(|(d, &gv)| *d += sign * gv);
                }
            }
        }
        Op::Mul(a, b) => {
            if let Some(da) = buf(nodes, grads, *a) {
                for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(val(*b)) {
                    *d += gv * bv;
                }
            }
            if let Some(db) = buf(nodes, grads, *b) {
                for ((d, &gv), &av) in db.iter_mut().zip(g).zip(val(*a)) {
                    *d += gv * av;
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(da) = buf(nodes, grads, *a) {
                da.iter_mut().zip(g).for_each(|(d, &gv)| *d += c * gv);
            }
        }
        Op::ScaleBy(a, s) => {
            let c = val(*s)[0];
            if let Some(da) = buf(nodes, grads, *a) {
                da.iter_mut().zip(g).for_each(|(d, &gv)| *d += c * gv);
            }
            if let Some(ds) = buf(nodes, grads, *s) {
                ds[0] += dot(g, val(*a));
            }
        }
        Op::AddTiled(x, t) => {
            if let Some(dx) = buf(nodes, grads, *x) {
                dx.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
            }
            let (l, n) = mat(*t);
            if let Some(dt) = buf(nodes, grads, *t) {
                for (idx, &gv) in g.iter().enumerate() {
                    dt[((idx / n) % l) * n + idx % n] += gv;
                }
            }
        }
        Op::Gelu(x) => {
            if let Some(dx) = buf(nodes, grads, *x) {
                for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(val(*x)) {
                    *d += gv * gelu_grad(xv);
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let (r, n) = mat(*x);
            let gam = val(*gamma).to_vec();
            if let Some(dg) = buf(nodes, grads, *gamma) {
                for (idx, &gv) in g.iter().enumerate() {
                    dg[idx % n] += gv * xhat[idx];
                }
            }
            if let Some(db) = buf(nodes, grads, *beta) {
                for (idx, &gv) in g.iter().enumerate() {
                    db[idx % n] += gv;
                }
            }
            if let Some(dx) = buf(nodes, grads, *x) {
                let mut dxhat = vec![0.0; n];
                for row in 0..r {
                    let gr = &g[row * n..(row + 1) * n];
                    let xh = &xhat[row * n..(row + 1) * n];
                    for j in 0..n {
                        dxhat[j] = gr[j] * gam[j];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dx = dot(&dxhat, xh) / n as f64;
                    for j in 0..n {
                        dx[row * n + j] += inv_std[row] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                    }
                }
            }
        }
        Op::Softmax(x) => {
            let (r, n) = mat(*x);
            let y = nodes[i].value.data();
            if let Some(dx) = buf(nodes, grads, *x) {
                for row in 0..r {
                    let yr = &y[row * n..(row + 1) * n];
                    let gr = &g[row * n..(row + 1) * n];
                    let s = dot(yr, gr);
                    for j in 0..n {
                        dx[row * n + j] += yr[j] * (gr[j] - s);
                    }
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            shape,
            probs,
        } => attention_backward(nodes, grads, g, *q, *k, *v, shape, probs),
        Op::GatherRows(x, idx) => {
            let (_, n) = mat(*x);
            if let Some(dx) = buf(nodes, grads, *x) {
                for (o, &src) in idx.iter().enumerate() {
                    for j in 0..n {
                        dx[src * n + j] += g[o * n + j];
                    }
                }
            }
        }
        Op::GroupMean(x, block) => {
            let (r, n) = mat(*x);
            if let Some(dx) = buf(nodes, grads, *x) {
                let inv = 1.0 / *block as f64;
                for row in 0..r {
                    let gr = &g[(row / block) * n..(row / block + 1) * n];
                    for j in 0..n {
                        dx[row * n + j] += gr[j] * inv;
                    }
                }
            }
        }
        Op::NormalizeRows(x, norms) => {
            let (r, n) = mat(*x);
            let y = nodes[i].value.data();
            if let Some(dx) = buf(nodes, grads, *x) {
                for row in 0..r {
                    if norms[row] < NORM_FLOOR {
                        continue;
                    }
                    let yr = &y[row * n..(row + 1) * n];
                    let gr = &g[row * n..(row + 1) * n];
                    let s = dot(yr, gr);
                    for j in 0..n {
                        dx[row * n + j] += (gr[j] - yr[j] * s) / norms[row];
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let (r, c) = mat(*logits);
            if let Some(dx) = buf(nodes, grads, *logits) {
                let s = g[0] / r as f64;
                for row in 0..r {
                    for j in 0..c {
                        let onehot = if j == targets[row] { 1.0 } else { 0.0 };
                        dx[row * c + j] += s * (probs[row * c + j] - onehot);
                    }
                }
            }
        }
        Op::Transpose(x) => {
            let (r, c) = mat(*x);
            if let Some(dx) = buf(nodes, grads, *x) {
                for a in 0..r {
                    for b in 0..c {
                        dx[a * c + b] += g[b * r + a];
                    }
                }
            }
        }
        Op::ConcatCols(a, b) => {
            let (r, ca) = mat(*a);
            let (_, cb) = mat(*b);
            let w = ca + cb;
            if let Some(da) = buf(nodes, grads, *a) {
                for row in 0..r {
                    for j in 0..ca {
                        da[row * ca + j] += g[row * w + j];
                    }
                }
            }
            if let Some(db) = buf(nodes, grads, *b) {
                for row in 0..r {
                    for j in 0..cb {
                        db[row * cb + j] += g[row * w + ca + j];
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(dx) = buf(nodes, grads, *x) {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::TopKSoftmax(x) => {
            let (r, e) = mat(*x);
            let y = nodes[i].value.data();
            if let Some(dx) = buf(nodes, grads, *x) {
                for row in 0..r {
                    let yr = &y[row * e..(row + 1) * e];
                    let gr = &g[row * e..(row + 1) * e];
                    let s = dot(yr, gr);
                    for j in 0..e {
                        dx[row * e + j] += yr[j] * (gr[j] - s);
                    }
                }
            }
        }
        Op::Column(x, j) => {
            let (_, c) = mat(*x);
            if let Some(dx) = buf(nodes, grads, *x) {
                for (row, &gv) in g.iter().enumerate() {
                    dx[row * c + j] += gv;
                }
            }
        }
        Op::ExpandRows(x, times) => {
            let (_, n) = mat(*x);
            if let Some(dx) = buf(nodes, grads, *x) {
                for (idx, &gv) in g.iter().enumerate() {
                    let row = idx / n / times;
                    dx[row * n + idx % n] += gv;
                }
            }
        }
        Op::MulCol(x, c) => {
            let (_, n) = mat(*x);
            let cd = val(*c);
            if let Some(dx) = buf(nodes, grads, *x) {
                for (idx, &gv) in g.iter().enumerate() {
                    dx[idx] += gv * cd[idx / n];
                }
            }
            let xd = val(*x);
            if let Some(dc) = buf(nodes, grads, *c) {
                for (idx, &gv) in g.iter().enumerate() {
                    dc[idx / n] += gv * xd[idx];
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    g: &[f64],
    q: Var,
    k: Var,
    v: Var,
    s: &AttnShape,
    probs: &[f64],
) {
    let (lq, lk, w, dh) = (s.q_len, s.kv_len, s.width, s.head_dim());
    let scale = s.scale();
    let qd = nodes[q.0].value.data();
    let kd = nodes[k.0].value.data();
    let vd = nodes[v.0].value.data();
    let mut dq = vec![0.0; qd.len()];
    let mut dk = vec![0.0; kd.len()];
    let mut dv = vec![0.0; vd.len()];
    let mut dp = vec![0.0; lk];
    for grp in 0..s.groups {
        for h in 0..s.heads {
            let off = h * dh;
            for i in 0..lq {
                let valid = if s.causal { i + 1 } else { lk };
                let p = &probs[((grp * s.heads + h) * lq + i) * lk..][..lk];
                let qi = (grp * lq + i) * w + off;
                let grow = &g[qi..qi + dh];
                for j in 0..valid {
                    let vj = (grp * lk + j) * w + off;
                    dp[j] = dot(grow, &vd[vj..vj + dh]);
                    for c in 0..dh {
                        dv[vj + c] += p[j] * grow[c];
                    }
                }
                let sdot: f64 = (0..valid).map(|j| p[j] * dp[j]).sum();
                for j in 0..valid {
                    let ds = p[j] * (dp[j] - sdot) / scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = (grp * lk + j) * w + off;
                    for c in 0..dh {
                        dq[qi + c] += ds * kd[kj + c];
                        dk[kj + c] += ds * qd[qi + c];
                    }
                }
            }
        }
    }
    for (var, d) in [(q, dq), (k, dk), (v, dv)] {
        if let Some(b) = buf(nodes, grads, var) {
            b.iter_mut().zip(&d).for_each(|(x, y)| *x += y);
        }
    }
}
