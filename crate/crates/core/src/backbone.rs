//! Desk-scale two-tower backbone: a frame encoder over synthetic patch grids
//! and a causal text encoder over token ids. Both are pre-LN transformers.
//! After pretraining every entry is frozen.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::error::{dim_err, Error, Result};
use crate::ffa::{self, previous_frame_rows, FfaStack};
use crate::losses;
use crate::numerics::{cosine_lr, Graph, Optimizer, ParameterSet, Scheme, Tensor, Var};
use crate::tame::{self, AdapterVars, Role, TameConfig};

pub const PAD: u32 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub width: usize,
    pub heads: usize,
    pub vision_layers: usize,
    pub text_layers: usize,
    pub patches: usize,
    /// Raw feature width of one synthetic patch.
    pub input_width: usize,
    pub vocab: usize,
    pub context: usize,
    pub mlp_ratio: usize,
    pub ln_eps: f64,
    /// Contrastive temperature used while pretraining.
    pub tau_pre: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            width: 32,
            heads: 4,
            vision_layers: 2,
            text_layers: 2,
            patches: 16,
            input_width: 16,
            vocab: 256,
            context: 16,
            mlp_ratio: 2,
            ln_eps: 1e-5,
            tau_pre: 0.05,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("width", self.width),
            ("vision_layers", self.vision_layers),
            ("text_layers", self.text_layers),
            ("patches", self.patches),
            ("input_width", self.input_width),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.vocab < 3 {
            return Err(Error::Config("vocabulary needs PAD, EOS and one word".into()));
        }
        if self.context < 2 {
            return Err(Error::Config("context must hold a word and EOS".into()));
        }
        if self.ln_eps <= 0.0 || self.tau_pre <= 0.0 {
            return Err(Error::Config("ln_eps and tau_pre must be positive".into()));
        }
        Ok(())
    }

    pub fn eos(&self) -> u32 {
        (self.vocab - 1) as u32
    }

    /// Rows per frame: patches plus the class token.
    pub fn frame_tokens(&self) -> usize {
        self.patches + 1
    }

    fn scalars(&self) -> [(&'static str, f64); 11] {
        [
            ("width", self.width as f64),
            ("heads", self.heads as f64),
            ("vision_layers", self.vision_layers as f64),
            ("text_layers", self.text_layers as f64),
            ("patches", self.patches as f64),
            ("input_width", self.input_width as f64),
            ("vocab", self.vocab as f64),
            ("context", self.context as f64),
            ("mlp_ratio", self.mlp_ratio as f64),
            ("ln_eps", self.ln_eps),
            ("tau_pre", self.tau_pre),
        ]
    }
}

/// One video as `[M, P, input_width]` patch features.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    data: Tensor,
}

impl Video {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 3 {
            return Err(dim_err!("video must be [frames, patches, width], got {:?}", data.shape()));
        }
        Ok(Self { data })
    }

    /// Stacks `[P, D]` frames; every frame must share one shape.
    pub fn from_frames(frames: &[Tensor]) -> Result<Self> {
        let first = frames.first().ok_or_else(|| dim_err!("video has no frames"))?;
        if first.rank() != 2 {
            return Err(dim_err!("frame must be [patches, width]"));
        }
        let mut data = Vec::with_capacity(frames.len() * first.numel());
        for f in frames {
            if f.shape() != first.shape() {
                return Err(dim_err!("frame shape {:?} differs from {:?}", f.shape(), first.shape()));
            }
            data.extend_from_slice(f.data());
        }
        let shape = vec![frames.len(), first.shape()[0], first.shape()[1]];
        Self::new(Tensor::new(shape, data)?)
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn patches(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }
}

/// Final-layer token maps of every frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTokens {
    /// `[M, P+1, O]`, class token first.
    pub tokens: Tensor,
    /// `[M, O]`.
    pub cls: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryTokens {
    pub ids: Vec<u32>,
    pub eos_index: usize,
    pub eos_feature: Tensor,
}

/// Position of the single EOS token. Everything after it must be padding.
pub fn eos_index(ids: &[u32], cfg: &BackboneConfig) -> Result<usize> {
    if ids.len() > cfg.context {
        return Err(Error::Input(format!(
            "query of {} tokens exceeds context {}",
            ids.len(),
            cfg.context
        )));
    }
    if let Some(bad) = ids.iter().find(|&&t| t as usize >= cfg.vocab) {
        return Err(Error::Input(format!("token {bad} outside vocabulary")));
    }
    let eos = cfg.eos();
    let mut found = None;
    for (i, &t) in ids.iter().enumerate() {
        if t == eos {
            if found.is_some() {
                return Err(Error::Input("query has more than one EOS".into()));
            }
            found = Some(i);
        }
    }
    let idx = found.ok_or_else(|| Error::Input("query has no EOS".into()))?;
    if ids[idx + 1..].iter().any(|&t| t != PAD) {
        return Err(Error::Input("only padding may follow EOS".into()));
    }
    Ok(idx)
}

/// Mean of the per-frame class features.
pub fn avg_pool_video(frames: &FrameTokens) -> Tensor {
    let (m, o) = frames.cls.as_matrix();
    let mut out = vec![0.0; o];
    for i in 0..m {
        for (acc, v) in out.iter_mut().zip(frames.cls.row(i)) {
            *acc += v;
        }
    }
    for v in &mut out {
        *v /= m as f64;
    }
    Tensor::new(vec![o], out).expect("width is positive")
}

/// Trainable temporal adapters to splice into the vision tower.
#[derive(Clone, Copy)]
pub struct FfaHook<'a> {
    pub stack: &'a FfaStack,
    pub params: &'a ParameterSet,
}

/// Routed low-rank adapters for the text tower. `prototype` is added to the
/// routing input of every adapted layer.
#[derive(Clone, Copy)]
pub struct TameHook<'a> {
    pub config: &'a TameConfig,
    pub params: &'a ParameterSet,
    pub prototype: Option<Var>,
}

pub struct VisionPass {
    /// `[N·M·(P+1), O]` after the final norm.
    pub tokens: Var,
    /// `[N·M, O]`.
    pub cls: Var,
    /// `[N, O]` average-pooled video features.
    pub features: Var,
    /// Spatial attention nodes per block.
    pub self_attention: Vec<Var>,
    /// Temporal cross-attention nodes per adapted block.
    pub cross_attention: Vec<Var>,
    pub frames: usize,
}

pub struct TextPass {
    /// `[B, O]` query features.
    pub eos: Var,
    pub eos_index: Vec<usize>,
    /// Gate nodes `[B, n_e]` per adapted (layer, role).
    pub gates: Vec<(usize, Role, Var)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub params: ParameterSet,
}

fn block_name(tower: &str, layer: usize, part: &str) -> String {
    format!("{tower}.{layer}.{part}")
}

struct Block {
    ln1: (Var, Var),
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    ln2: (Var, Var),
    fc1: (Var, Var),
    fc2: (Var, Var),
}

impl BackboneParams {
    pub fn init<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let o = config.width;
        let hidden = o * config.mlp_ratio;
        let mut p = ParameterSet::new();
        let lin = |n_in: usize| 1.0 / (n_in as f64).sqrt();
        p.insert("vision.patch_w", Tensor::randn(&[o, config.input_width], lin(config.input_width), rng))?;
        p.insert("vision.cls", Tensor::randn(&[o, 1], 0.1, rng))?;
        p.insert("vision.pos", Tensor::randn(&[config.frame_tokens(), o], 0.1, rng))?;
        p.insert("text.tok", Tensor::randn(&[config.vocab, o], 1.0, rng))?;
        p.insert("text.pos", Tensor::randn(&[config.context, o], 0.1, rng))?;
        for (tower, layers) in [("vision", config.vision_layers), ("text", config.text_layers)] {
            p.insert(format!("{tower}.ln_pre.g"), Tensor::full(&[o], 1.0))?;
            p.insert(format!("{tower}.ln_pre.b"), Tensor::zeros(&[o]))?;
            let resid = lin(o) / ((2 * layers) as f64).sqrt();
            for l in 0..layers {
                for ln in ["ln1", "ln2"] {
                    p.insert(block_name(tower, l, &format!("{ln}.g")), Tensor::full(&[o], 1.0))?;
                    p.insert(block_name(tower, l, &format!("{ln}.b")), Tensor::zeros(&[o]))?;
                }
                for w in ["wq", "wk", "wv"] {
                    p.insert(block_name(tower, l, w), Tensor::randn(&[o, o], lin(o), rng))?;
                }
                p.insert(block_name(tower, l, "wo"), Tensor::randn(&[o, o], resid, rng))?;
                p.insert(block_name(tower, l, "fc1.w"), Tensor::randn(&[hidden, o], lin(o), rng))?;
                p.insert(block_name(tower, l, "fc1.b"), Tensor::zeros(&[hidden]))?;
                p.insert(
                    block_name(tower, l, "fc2.w"),
                    Tensor::randn(&[o, hidden], lin(hidden) / ((2 * layers) as f64).sqrt(), rng),
                )?;
                p.insert(block_name(tower, l, "fc2.b"), Tensor::zeros(&[o]))?;
            }
            p.insert(format!("{tower}.ln_post.g"), Tensor::full(&[o], 1.0))?;
            p.insert(format!("{tower}.ln_post.b"), Tensor::zeros(&[o]))?;
        }
        Ok(Self { config, params: p })
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    pub fn freeze(&mut self) {
        self.params.freeze_all();
    }

    pub fn is_frozen(&self) -> bool {
        self.params.names().all(|n| self.params.is_frozen(n))
    }

    /// Checkpoint tensors: every weight plus `meta.*` scalars for the config.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta: Vec<(String, Tensor)> = self
            .config
            .scalars()
            .iter()
            .map(|(k, v)| (format!("meta.{k}"), Tensor::scalar(*v)))
            .collect();
        let mut entries: Vec<(&str, &Tensor)> = meta.iter().map(|(k, t)| (k.as_str(), t)).collect();
        entries.extend(self.params.iter());
        checkpoint::encode(&entries)
    }

    /// Rebuilds from checkpoint tensors. `meta.*` entries become the config;
    /// names outside the backbone (adapters) are ignored. The result is frozen.
    pub fn from_tensors(tensors: &[(String, Tensor)]) -> Result<Self> {
        let meta = |key: &str| -> Result<f64> {
            tensors
                .iter()
                .find(|(n, _)| n == &format!("meta.{key}"))
                .map(|(_, t)| t.data()[0])
                .ok_or_else(|| Error::Format(format!("checkpoint lacks meta.{key}")))
        };
        let count = |key: &str| -> Result<usize> { Ok(meta(key)? as usize) };
        let config = BackboneConfig {
            width: count("width")?,
            heads: count("heads")?,
            vision_layers: count("vision_layers")?,
            text_layers: count("text_layers")?,
            patches: count("patches")?,
            input_width: count("input_width")?,
            vocab: count("vocab")?,
            context: count("context")?,
            mlp_ratio: count("mlp_ratio")?,
            ln_eps: meta("ln_eps")?,
            tau_pre: meta("tau_pre")?,
        };
        config.validate()?;
        let template = Self::init(config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut params = ParameterSet::new();
        for (name, t) in tensors {
            if let Ok(expected) = template.params.get(name) {
                if expected.shape() != t.shape() {
                    return Err(Error::Format(format!("{name} has shape {:?}", t.shape())));
                }
                params.insert(name.clone(), t.clone())?;
            }
        }
        if let Some(missing) = template.params.names().find(|n| !params.contains(n)) {
            return Err(Error::Format(format!("checkpoint lacks {missing}")));
        }
        params.freeze_all();
        Ok(Self { config, params })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        Self::from_tensors(&checkpoint::decode(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    fn bind_block(&self, g: &mut Graph, tower: &str, l: usize) -> Result<Block> {
        let p = &self.params;
        let mut u = |part: &str| g.use_param(p, &block_name(tower, l, part));
        Ok(Block {
            ln1: (u("ln1.g")?, u("ln1.b")?),
            wq: u("wq")?,
            wk: u("wk")?,
            wv: u("wv")?,
            wo: u("wo")?,
            ln2: (u("ln2.g")?, u("ln2.b")?),
            fc1: (u("fc1.w")?, u("fc1.b")?),
            fc2: (u("fc2.w")?, u("fc2.b")?),
        })
    }

    fn norm(&self, g: &mut Graph, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        g.layer_norm(x, gamma, beta, self.config.ln_eps)
    }

    fn named_norm(&self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let gamma = g.use_param(&self.params, &format!("{prefix}.g"))?;
        let beta = g.use_param(&self.params, &format!("{prefix}.b"))?;
        self.norm(g, x, gamma, beta)
    }

    fn mlp(&self, g: &mut Graph, x: Var, b: &Block) -> Result<Var> {
        let h = self.norm(g, x, b.ln2.0, b.ln2.1)?;
        let h = g.matmul_bt(h, b.fc1.0)?;
        let h = g.add_tiled(h, b.fc1.1)?;
        let h = g.gelu(h)?;
        let h = g.matmul_bt(h, b.fc2.0)?;
        let h = g.add_tiled(h, b.fc2.1)?;
        g.add(x, h)
    }

    /// Batched frame encoder over `videos`, all sharing `M`, `P` and input width.
    pub fn vision_graph(&self, g: &mut Graph, videos: &[&Video], ffa: Option<FfaHook<'_>>) -> Result<VisionPass> {
        let cfg = &self.config;
        let first = videos.first().ok_or_else(|| dim_err!("no videos to encode"))?;
        let (m, p, d) = (first.frames(), first.patches(), first.width());
        if p != cfg.patches || d != cfg.input_width {
            return Err(dim_err!(
                "video patches {p}x{d} do not match backbone {}x{}",
                cfg.patches,
                cfg.input_width
            ));
        }
        if videos.iter().any(|v| v.tensor().shape() != first.tensor().shape()) {
            return Err(dim_err!("videos in one batch must share a shape"));
        }
        if let Some(h) = &ffa {
            h.stack.check_depth(cfg.vision_layers)?;
            if h.stack.width != cfg.width {
                return Err(dim_err!("adapter width {} != backbone width {}", h.stack.width, cfg.width));
            }
        }
        let n = videos.len();
        let lt = p + 1;
        let frames = n * m;
        // Row 0 of each frame selects the class embedding, rows 1..=P carry patches.
        let mut input = vec![0.0; frames * lt * (d + 1)];
        for (vi, v) in videos.iter().enumerate() {
            let src = v.tensor().data();
            for f in 0..m {
                let base = (vi * m + f) * lt;
                input[base * (d + 1)] = 1.0;
                for t in 0..p {
                    let row = (base + 1 + t) * (d + 1);
                    let s = (f * p + t) * d;
                    input[row + 1..row + 1 + d].copy_from_slice(&src[s..s + d]);
                }
            }
        }
        let x = g.constant(Tensor::new(vec![frames * lt, d + 1], input)?);
        let cls = g.use_param(&self.params, "vision.cls")?;
        let patch_w = g.use_param(&self.params, "vision.patch_w")?;
        let embed_w = g.concat_cols(cls, patch_w)?;
        let pos = g.use_param(&self.params, "vision.pos")?;
        let mut x = g.matmul_bt(x, embed_w)?;
        x = g.add_tiled(x, pos)?;
        x = self.named_norm(g, x, "vision.ln_pre")?;

        let prev_rows = previous_frame_rows(n, m, lt);
        let mut self_attention = Vec::new();
        let mut cross_attention = Vec::new();
        for l in 0..cfg.vision_layers {
            let b = self.bind_block(g, "vision", l)?;
            let h = self.norm(g, x, b.ln1.0, b.ln1.1)?;
            let sa = g.multi_head_attention(h, h, b.wq, b.wk, b.wv, cfg.heads, frames, false)?;
            self_attention.push(sa);
            let mut mixed = g.matmul_bt(sa, b.wo)?;
            if let Some(hook) = ffa.filter(|hk| l < hk.stack.attach_depth) {
                let w = [
                    g.use_param(hook.params, &ffa::param_name(l, "wq"))?,
                    g.use_param(hook.params, &ffa::param_name(l, "wk"))?,
                    g.use_param(hook.params, &ffa::param_name(l, "wv"))?,
                ];
                let alpha = g.use_param(hook.params, &ffa::param_name(l, "alpha"))?;
                let prev = g.gather_rows(h, prev_rows.clone())?;
                let ca = ffa::cross_attend_graph(g, w, prev, h, frames, hook.stack.heads)?;
                cross_attention.push(ca);
                mixed = ffa::fuse_graph(g, mixed, ca, alpha)?;
            }
            x = g.add(x, mixed)?;
            x = self.mlp(g, x, &b)?;
        }
        let tokens = self.named_norm(g, x, "vision.ln_post")?;
        let cls_rows: Vec<usize> = (0..frames).map(|f| f * lt).collect();
        let cls = g.gather_rows(tokens, cls_rows)?;
        let features = g.group_mean(cls, m)?;
        Ok(VisionPass {
            tokens,
            cls,
            features,
            self_attention,
            cross_attention,
            frames: m,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn text_projection(
        &self,
        g: &mut Graph,
        h: Var,
        w: Var,
        layer: usize,
        role: Role,
        route_src: Var,
        hook: Option<&TameHook<'_>>,
        seq_len: usize,
        gates_out: &mut Vec<(usize, Role, Var)>,
    ) -> Result<Var> {
        match hook {
            Some(t) if t.config.has_role(role) && t.config.lambda != 0.0 => {
                let vars = AdapterVars::bind(g, t.params, t.config, layer, role)?;
                let gates = tame::route_graph(g, vars.router, route_src, t.prototype, t.config.k)?;
                gates_out.push((layer, role, gates));
                let e = tame::experts_graph(g, &vars, h, gates, seq_len)?;
                tame::adapted_linear_graph(g, w, h, Some(e), t.config.lambda)
            }
            _ => g.matmul_bt(h, w),
        }
    }

    /// Batched causal text encoder. Queries are right-padded to the longest.
    pub fn text_graph(&self, g: &mut Graph, queries: &[&[u32]], tame: Option<TameHook<'_>>) -> Result<TextPass> {
        let cfg = &self.config;
        if queries.is_empty() {
            return Err(dim_err!("no queries to encode"));
        }
        let eos_index = queries
            .iter()
            .map(|q| eos_index(q, cfg))
            .collect::<Result<Vec<_>>>()?;
        if let Some(t) = &tame {
            t.config.validate()?;
            if t.config.width != cfg.width {
                return Err(dim_err!("adapter width {} != backbone width {}", t.config.width, cfg.width));
            }
        }
        let len = queries.iter().map(|q| q.len()).max().unwrap_or(1);
        let b = queries.len();
        let mut ids = Vec::with_capacity(b * len);
        for q in queries {
            ids.extend(q.iter().map(|&t| t as usize));
            ids.extend(std::iter::repeat_n(PAD as usize, len - q.len()));
        }
        let eos_rows: Vec<usize> = eos_index.iter().enumerate().map(|(i, &e)| i * len + e).collect();

        let tok = g.use_param(&self.params, "text.tok")?;
        let mut x = g.gather_rows(tok, ids)?;
        let mut pos = g.use_param(&self.params, "text.pos")?;
        if len < cfg.context {
            pos = g.gather_rows(pos, (0..len).collect())?;
        }
        x = g.add_tiled(x, pos)?;
        x = self.named_norm(g, x, "text.ln_pre")?;

        // Routing reads the sentence feature of the frozen tower.
        let route_src = match &tame {
            Some(t) if t.config.lambda != 0.0 => {
                let mut plain = Graph::new();
                let pass = self.text_graph(&mut plain, queries, None)?;
                g.constant(plain.value(pass.eos).clone())
            }
            _ => g.constant(Tensor::zeros(&[b, cfg.width])),
        };
        let mut gates = Vec::new();
        for l in 0..cfg.text_layers {
            let blk = self.bind_block(g, "text", l)?;
            let h = self.norm(g, x, blk.ln1.0, blk.ln1.1)?;
            let hook = tame.as_ref();
            let q = self.text_projection(g, h, blk.wq, l, Role::Q, route_src, hook, len, &mut gates)?;
            let k = self.text_projection(g, h, blk.wk, l, Role::K, route_src, hook, len, &mut gates)?;
            let v = self.text_projection(g, h, blk.wv, l, Role::V, route_src, hook, len, &mut gates)?;
            let att = g.attention(q, k, v, b, cfg.heads, true)?;
            let out = self.text_projection(g, att, blk.wo, l, Role::Out, route_src, hook, len, &mut gates)?;
            x = g.add(x, out)?;
            x = self.mlp(g, x, &blk)?;
        }
        let eos = g.gather_rows(x, eos_rows)?;
        let eos = self.named_norm(g, eos, "text.ln_post")?;
        Ok(TextPass {
            eos,
            eos_index,
            gates,
        })
    }

    /// Token maps and class features of one video.
    pub fn encode_frames(&self, video: &Video, ffa: Option<FfaHook<'_>>) -> Result<FrameTokens> {
        let mut g = Graph::new();
        let pass = self.vision_graph(&mut g, &[video], ffa)?;
        let m = video.frames();
        let o = self.config.width;
        let tokens = g.value(pass.tokens).clone().reshape(vec![m, self.config.frame_tokens(), o])?;
        Ok(FrameTokens {
            tokens,
            cls: g.value(pass.cls).clone(),
        })
    }

    /// Query feature of one token sequence, optionally through adapters
    /// conditioned on `prototype`.
    pub fn encode_text(
        &self,
        ids: &[u32],
        tame: Option<(&TameConfig, &ParameterSet)>,
        prototype: Option<&Tensor>,
    ) -> Result<QueryTokens> {
        let mut g = Graph::new();
        let proto = prototype.map(|p| g.constant(p.clone()));
        let hook = tame.map(|(config, params)| TameHook {
            config,
            params,
            prototype: proto,
        });
        let pass = self.text_graph(&mut g, &[ids], hook)?;
        let o = self.config.width;
        Ok(QueryTokens {
            ids: ids.to_vec(),
            eos_index: pass.eos_index[0],
            eos_feature: g.value(pass.eos).clone().reshape(vec![o])?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch: 32,
            lr: 2e-3,
            seed: 0,
        }
    }
}

/// Trains both towers with symmetric InfoNCE on base pairs, then freezes
/// every entry. Weights are rounded to `f32` so the returned value equals
/// what a checkpoint reload produces.
pub fn pretrain_backbone(
    base: &[(Vec<u32>, Video)],
    config: BackboneConfig,
    opts: &PretrainOptions,
) -> Result<BackboneParams> {
    if base.is_empty() {
        return Err(Error::Usage("pretraining needs a nonempty base set".into()));
    }
    if opts.batch < 2 || opts.epochs == 0 {
        return Err(Error::Config("pretraining needs batch >= 2 and epochs >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut model = BackboneParams::init(config, &mut rng)?;
    let mut optim = Optimizer::new(Scheme::adam());
    let mut order: Vec<usize> = (0..base.len()).collect();
    for epoch in 0..opts.epochs {
        let lr = cosine_lr(opts.lr, epoch, opts.epochs);
        order.shuffle(&mut rng);
        for chunk in order.chunks(opts.batch) {
            if chunk.len() < 2 {
                continue;
            }
            let mut g = Graph::new();
            let videos: Vec<&Video> = chunk.iter().map(|&i| &base[i].1).collect();
            let queries: Vec<&[u32]> = chunk.iter().map(|&i| base[i].0.as_slice()).collect();
            let vis = model.vision_graph(&mut g, &videos, None)?;
            let txt = model.text_graph(&mut g, &queries, None)?;
            let loss = losses::total_graph(&mut g, txt.eos, vis.features, None, model.config.tau_pre, 0.0)?;
            let grads = g.backward(loss)?;
            optim.step(&mut model.params, &grads, lr)?;
        }
    }
    model.freeze();
    BackboneParams::decode(&model.encode()?)
}
