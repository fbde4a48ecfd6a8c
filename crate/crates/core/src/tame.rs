//! Task-Aware Mixture-of-Experts adapters for the text tower.
//!
//! Each adapted linear layer keeps its frozen weight `W` and adds a routed
//! low-rank residual: `X* = X·Wᵀ + λ·Σ_{i∈TopK} w_i·(B_i A X)`. The encoder
//! `A` is shared by all experts; each expert owns a decoder `B_i`. Gates come
//! from `softmax(TopK(R·(x_eos + p_t)))` where `p_t` is the task prototype.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::numerics::{top_k_indices, Graph, ParameterSet, Tensor, Var};

/// Which projection of a text self-attention block carries an adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Q,
    K,
    V,
    Out,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Q => "q",
            Role::K => "k",
            Role::V => "v",
            Role::Out => "out",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "q" => Ok(Role::Q),
            "k" => Ok(Role::K),
            "v" => Ok(Role::V),
            "out" => Ok(Role::Out),
            other => Err(Error::Config(format!("unknown adapter role {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TameConfig {
    pub experts: usize,
    pub k: usize,
    pub rank: usize,
    pub lambda: f64,
    pub roles: Vec<Role>,
    pub width: usize,
}

pub const INIT_STD: f64 = 0.02;

pub fn param_name(layer: usize, role: Role, part: &str) -> String {
    format!("tame.{layer}.{role}.{part}")
}

pub fn decoder_name(layer: usize, role: Role, expert: usize) -> String {
    format!("tame.{layer}.{role}.B.{expert}")
}

impl TameConfig {
    pub fn validate(&self) -> Result<()> {
        if self.experts == 0 || self.k == 0 || self.k > self.experts {
            return Err(Error::Config(format!(
                "need 1 <= k <= experts, got k={} experts={}",
                self.k, self.experts
            )));
        }
        if self.rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        Ok(())
    }

    pub fn has_role(&self, role: Role) -> bool {
        self.roles.contains(&role)
    }

    /// `A` and the router from N(0, 0.02²); every `B_i` starts at zero.
    pub fn init_params<R: Rng + ?Sized>(&self, layers: usize, rng: &mut R) -> Result<ParameterSet> {
        self.validate()?;
        let mut set = ParameterSet::new();
        let o = self.width;
        for l in 0..layers {
            for &role in &self.roles {
                set.insert(
                    param_name(l, role, "A"),
                    Tensor::randn(&[self.rank, o], INIT_STD, rng),
                )?;
                for i in 0..self.experts {
                    set.insert(decoder_name(l, role, i), Tensor::zeros(&[o, self.rank]))?;
                }
                set.insert(
                    param_name(l, role, "router"),
                    Tensor::randn(&[self.experts, o], INIT_STD, rng),
                )?;
            }
        }
        Ok(set)
    }

    pub fn adapter(&self, params: &ParameterSet, layer: usize, role: Role) -> Result<TameAdapter> {
        Ok(TameAdapter {
            a: params.get(&param_name(layer, role, "A"))?.clone(),
            b: (0..self.experts)
                .map(|i| params.get(&decoder_name(layer, role, i)).cloned())
                .collect::<Result<_>>()?,
            router: params.get(&param_name(layer, role, "router"))?.clone(),
            lambda: self.lambda,
            k: self.k,
        })
    }
}

/// Graph handles of one adapted linear layer.
#[derive(Clone, Debug)]
pub struct AdapterVars {
    pub a: Var,
    pub b: Vec<Var>,
    pub router: Var,
}

impl AdapterVars {
    pub fn bind(g: &mut Graph, params: &ParameterSet, cfg: &TameConfig, layer: usize, role: Role) -> Result<Self> {
        Ok(Self {
            a: g.use_param(params, &param_name(layer, role, "A"))?,
            b: (0..cfg.experts)
                .map(|i| g.use_param(params, &decoder_name(layer, role, i)))
                .collect::<Result<_>>()?,
            router: g.use_param(params, &param_name(layer, role, "router"))?,
        })
    }
}

/// Gates `[B, n_e]` from per-sequence EOS rows `[B, O]` plus an optional
/// prototype `[O]` shared across the batch.
pub fn route_graph(g: &mut Graph, router: Var, eos: Var, prototype: Option<Var>, k: usize) -> Result<Var> {
    let input = match prototype {
        Some(p) => g.add_tiled(eos, p)?,
        None => eos,
    };
    let logits = g.matmul_bt(input, router)?;
    g.topk_softmax(logits, k)
}

/// `E(X) = Σ_i w_i·(X Aᵀ B_iᵀ)` for `X: [B·L, O]`, gates `[B, n_e]`.
/// Experts with zero gate on every sequence are skipped entirely.
pub fn experts_graph(g: &mut Graph, vars: &AdapterVars, x: Var, gates: Var, seq_len: usize) -> Result<Var> {
    let (batch, experts) = g.value(gates).as_matrix();
    if experts != vars.b.len() {
        return Err(dim_err!("{} gates for {} experts", experts, vars.b.len()));
    }
    if g.value(x).as_matrix().0 != batch * seq_len {
        return Err(dim_err!("token rows do not match {batch} sequences of {seq_len}"));
    }
    let hidden = g.matmul_bt(x, vars.a)?;
    let mut total: Option<Var> = None;
    for (i, &b) in vars.b.iter().enumerate() {
        let used = (0..batch).any(|s| g.value(gates).get2(s, i) != 0.0);
        if !used {
            continue;
        }
        let y = g.matmul_bt(hidden, b)?;
        let w = g.column(gates, i)?;
        let w = g.expand_rows(w, seq_len)?;
        let y = g.mul_col(y, w)?;
        total = Some(match total {
            Some(t) => g.add(t, y)?,
            None => y,
        });
    }
    Ok(total.expect("top-k keeps at least one expert"))
}

/// `X·Wᵀ + λ·E(X)`; the residual is skipped when `lambda == 0`.
pub fn adapted_linear_graph(g: &mut Graph, w: Var, x: Var, experts: Option<Var>, lambda: f64) -> Result<Var> {
    let base = g.matmul_bt(x, w)?;
    match experts {
        Some(e) if lambda != 0.0 => {
            let scaled = g.scale(e, lambda)?;
            g.add(base, scaled)
        }
        _ => Ok(base),
    }
}

/// One adapter's weights as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct TameAdapter {
    pub a: Tensor,
    pub b: Vec<Tensor>,
    pub router: Tensor,
    pub lambda: f64,
    pub k: usize,
}

impl TameAdapter {
    fn bind(&self, g: &mut Graph) -> AdapterVars {
        AdapterVars {
            a: g.constant(self.a.clone()),
            b: self.b.iter().map(|t| g.constant(t.clone())).collect(),
            router: g.constant(self.router.clone()),
        }
    }

    /// Gate vector for one sequence.
    pub fn route(&self, eos: &Tensor, prototype: &Tensor) -> Result<Vec<f64>> {
        let experts = self.b.len();
        if self.k == 0 || self.k > experts {
            return Err(Error::Config(format!("k={} with {experts} experts", self.k)));
        }
        let o = self.router.as_matrix().1;
        if eos.numel() != o || prototype.numel() != o {
            return Err(dim_err!("routing inputs must have width {o}"));
        }
        let mut g = Graph::new();
        let r = g.constant(self.router.clone());
        let e = g.constant(eos.clone().reshape(vec![1, o])?);
        let p = g.constant(prototype.clone());
        let gates = route_graph(&mut g, r, e, Some(p), self.k)?;
        Ok(g.value(gates).data().to_vec())
    }

    pub fn experts_apply(&self, x: &Tensor, gates: &[f64]) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let xv = g.constant(x.clone());
        let gv = g.constant(Tensor::new(vec![1, gates.len()], gates.to_vec())?);
        let rows = x.as_matrix().0;
        let out = experts_graph(&mut g, &vars, xv, gv, rows)?;
        Ok(g.value(out).clone())
    }

    pub fn adapted_linear(&self, frozen_w: &Tensor, x: &Tensor, gates: &[f64]) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let xv = g.constant(x.clone());
        let w = g.constant(frozen_w.clone());
        let gv = g.constant(Tensor::new(vec![1, gates.len()], gates.to_vec())?);
        let rows = x.as_matrix().0;
        let e = experts_graph(&mut g, &vars, xv, gv, rows)?;
        let out = adapted_linear_graph(&mut g, w, xv, Some(e), self.lambda)?;
        Ok(g.value(out).clone())
    }

    /// Indices of the experts the router keeps for this input.
    pub fn selected(&self, eos: &Tensor, prototype: &Tensor) -> Result<Vec<usize>> {
        let input: Vec<f64> = eos.data().iter().zip(prototype.data()).map(|(a, b)| a + b).collect();
        let logits = Tensor::new(vec![input.len(), 1], input)
            .and_then(|x| self.router.matmul(&x))?;
        Ok(top_k_indices(logits.data(), self.k))
    }
}

/// Per-task prototypes `p_1..p_T`. Only the prototype of the active task is
/// trainable; earlier ones are frozen.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrototypeBank {
    params: ParameterSet,
    count: usize,
    width: usize,
}

pub fn prototype_name(task: usize) -> String {
    format!("proto.{task}")
}

impl PrototypeBank {
    pub fn new(width: usize) -> Self {
        Self {
            params: ParameterSet::new(),
            count: 0,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// The most recently opened task, if any.
    pub fn active_task(&self) -> Option<usize> {
        (self.count > 0).then_some(self.count)
    }

    /// Opens task `t` (1-based): appends a zero prototype and freezes every
    /// earlier one. With `trainable == false` the new prototype stays pinned.
    pub fn begin_task(&mut self, t: usize, trainable: bool) -> Result<()> {
        if t != self.count + 1 {
            return Err(Error::Protocol(format!(
                "expected task {}, got {t}",
                self.count + 1
            )));
        }
        if let Some(prev) = self.active_task() {
            self.params.freeze(&prototype_name(prev))?;
        }
        let name = prototype_name(t);
        self.params.insert(name.clone(), Tensor::zeros(&[self.width]))?;
        if !trainable {
            self.params.freeze(&name)?;
        }
        self.count = t;
        Ok(())
    }

    pub fn prototype(&self, t: usize) -> Result<&Tensor> {
        self.params.get(&prototype_name(t))
    }

    pub fn prototypes(&self) -> Vec<&Tensor> {
        (1..=self.count)
            .map(|t| self.prototype(t).expect("tasks are contiguous"))
            .collect()
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    /// Rebuilds a bank from stored prototypes; the last one stays trainable.
    pub fn from_prototypes(width: usize, protos: Vec<Tensor>) -> Result<Self> {
        let mut bank = Self::new(width);
        for (i, p) in protos.into_iter().enumerate() {
            if p.numel() != width {
                return Err(dim_err!("prototype width {} != {width}", p.numel()));
            }
            bank.begin_task(i + 1, true)?;
            *bank.params.get_mut(&prototype_name(i + 1))? = p;
        }
        Ok(bank)
    }
}
