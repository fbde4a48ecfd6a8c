//! The adapted retrieval model: a frozen backbone with frame fusion adapters
//! on the vision side, routed experts on the text side and a prototype bank.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{BackboneParams, FfaHook, TameHook, Video};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::ffa::FfaStack;
use crate::numerics::{Graph, ParameterSet, Tensor};
use crate::tame::{PrototypeBank, Role, TameConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterConfig {
    pub ffa_depth: usize,
    /// `None` disables the text adapters entirely.
    pub tame: Option<TameConfig>,
    /// Keeps every prototype at zero so routing sees the EOS feature alone.
    pub pin_prototypes: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CtvrModel {
    pub backbone: BackboneParams,
    pub ffa: FfaStack,
    pub ffa_params: ParameterSet,
    pub tame: Option<TameConfig>,
    pub tame_params: ParameterSet,
    pub bank: PrototypeBank,
    pub pin_prototypes: bool,
}

const ROLES: [Role; 4] = [Role::Q, Role::K, Role::V, Role::Out];

impl CtvrModel {
    pub fn new(backbone: BackboneParams, adapters: &AdapterConfig, seed: u64) -> Result<Self> {
        let cfg = &backbone.config;
        let ffa = FfaStack::new(adapters.ffa_depth, cfg.heads, cfg.width)?;
        ffa.check_depth(cfg.vision_layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ffa_params = ffa.init_params(&mut rng);
        let tame_params = match &adapters.tame {
            Some(t) => {
                if t.width != cfg.width {
                    return Err(Error::Config(format!("adapter width {} != backbone width {}", t.width, cfg.width)));
                }
                t.init_params(cfg.text_layers, &mut rng)?
            }
            None => ParameterSet::new(),
        };
        Ok(Self {
            bank: PrototypeBank::new(cfg.width),
            backbone,
            ffa,
            ffa_params,
            tame: adapters.tame.clone(),
            tame_params,
            pin_prototypes: adapters.pin_prototypes,
        })
    }

    pub fn width(&self) -> usize {
        self.backbone.config.width
    }

    pub fn ffa_hook(&self) -> Option<FfaHook<'_>> {
        (self.ffa.attach_depth > 0).then_some(FfaHook {
            stack: &self.ffa,
            params: &self.ffa_params,
        })
    }

    pub fn begin_task(&mut self, t: usize) -> Result<()> {
        self.bank.begin_task(t, !self.pin_prototypes)
    }

    /// Whether video features depend on anything trainable.
    pub fn video_path_trainable(&self) -> bool {
        self.ffa.attach_depth > 0
    }

    /// `[N, O]` video features, evaluated in chunks of `chunk` videos.
    pub fn video_features(&self, videos: &[&Video], chunk: usize) -> Result<Tensor> {
        let o = self.width();
        let mut data = Vec::with_capacity(videos.len() * o);
        for part in videos.chunks(chunk.max(1)) {
            let mut g = Graph::new();
            let pass = self.backbone.vision_graph(&mut g, part, self.ffa_hook())?;
            data.extend_from_slice(g.value(pass.features).data());
        }
        Tensor::new(vec![videos.len(), o], data)
    }

    /// `[B, O]` query features conditioned on the prototype of `task`.
    pub fn query_features(&self, queries: &[&[u32]], task: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let hook = match &self.tame {
            Some(config) => {
                let proto = g.constant(self.bank.prototype(task)?.clone());
                Some(TameHook {
                    config,
                    params: &self.tame_params,
                    prototype: Some(proto),
                })
            }
            None => None,
        };
        let pass = self.backbone.text_graph(&mut g, queries, hook)?;
        Ok(g.value(pass.eos).clone())
    }

    /// One feature per stored prototype for each query: `out[i]` is `[B, O]`
    /// under prototype `i + 1`.
    pub fn conditional_query_sweep(&self, queries: &[&[u32]]) -> Result<Vec<Tensor>> {
        if self.bank.is_empty() {
            return Err(Error::Protocol("prototype bank is empty".into()));
        }
        if self.tame.is_none() {
            // Without adapters every prototype yields the frozen tower's feature.
            let q = self.query_features(queries, 1)?;
            return Ok(vec![q; self.bank.len()]);
        }
        (1..=self.bank.len()).map(|t| self.query_features(queries, t)).collect()
    }

    /// Checksum of every trainable group, keyed by prefix.
    pub fn adapter_checksums(&self) -> [(String, String); 3] {
        [
            ("ffa".into(), self.ffa_params.checksum()),
            ("tame".into(), self.tame_params.checksum()),
            ("proto".into(), self.bank.params().checksum()),
        ]
    }

    fn meta(&self) -> Vec<(String, Tensor)> {
        let mut m = vec![
            ("model.ffa_depth", self.ffa.attach_depth as f64),
            ("model.tasks", self.bank.len() as f64),
            ("model.pin_prototypes", self.pin_prototypes as u8 as f64),
            ("model.tame", self.tame.is_some() as u8 as f64),
        ];
        if let Some(t) = &self.tame {
            let mask = ROLES
                .iter()
                .enumerate()
                .filter(|(_, r)| t.has_role(**r))
                .map(|(i, _)| 1u32 << i)
                .sum::<u32>();
            m.extend([
                ("model.experts", t.experts as f64),
                ("model.k", t.k as f64),
                ("model.rank", t.rank as f64),
                ("model.lambda", t.lambda),
                ("model.roles", mask as f64),
            ]);
        }
        m.into_iter().map(|(k, v)| (k.to_string(), Tensor::scalar(v))).collect()
    }

    /// Full checkpoint: backbone, adapters, prototypes and their settings.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let backbone = checkpoint::decode(&self.backbone.encode()?)?;
        let meta = self.meta();
        let mut entries: Vec<(&str, &Tensor)> = backbone.iter().map(|(k, t)| (k.as_str(), t)).collect();
        entries.extend(meta.iter().map(|(k, t)| (k.as_str(), t)));
        entries.extend(self.ffa_params.iter());
        entries.extend(self.tame_params.iter());
        entries.extend(self.bank.params().iter());
        checkpoint::encode(&entries)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let tensors = checkpoint::decode(bytes)?;
        let backbone = BackboneParams::from_tensors(&tensors)?;
        let get = |k: &str| -> Result<f64> {
            tensors
                .iter()
                .find(|(n, _)| n == k)
                .map(|(_, t)| t.data()[0])
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {k}")))
        };
        let tame = if get("model.tame")? != 0.0 {
            let mask = get("model.roles")? as u32;
            Some(TameConfig {
                experts: get("model.experts")? as usize,
                k: get("model.k")? as usize,
                rank: get("model.rank")? as usize,
                lambda: get("model.lambda")?,
                roles: ROLES
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| mask & (1 << i) != 0)
                    .map(|(_, r)| *r)
                    .collect(),
                width: backbone.config.width,
            })
        } else {
            None
        };
        let adapters = AdapterConfig {
            ffa_depth: get("model.ffa_depth")? as usize,
            tame,
            pin_prototypes: get("model.pin_prototypes")? != 0.0,
        };
        let mut model = Self::new(backbone, &adapters, 0)?;
        let tasks = get("model.tasks")? as usize;
        let lookup = |name: &str| -> Result<Tensor> {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))
        };
        for set in [&mut model.ffa_params, &mut model.tame_params] {
            let names: Vec<String> = set.names().map(str::to_string).collect();
            for name in names {
                let t = lookup(&name)?;
                let slot = set.get_mut(&name)?;
                if slot.shape() != t.shape() {
                    return Err(Error::Format(format!("{name} has shape {:?}", t.shape())));
                }
                *slot = t;
            }
        }
        for t in 1..=tasks {
            model.begin_task(t)?;
            let p = lookup(&crate::tame::prototype_name(t))?;
            *model.bank.params_mut().get_mut(&crate::tame::prototype_name(t))? = p;
        }
        Ok(model)
    }

    /// Replaces every adapter weight with its `f32` rounding, matching a
    /// reload. The frozen backbone is left bit-for-bit as it was.
    pub fn round_to_checkpoint(&mut self) -> Result<()> {
        let mut rounded = Self::decode(&self.encode()?)?;
        std::mem::swap(&mut rounded.backbone, &mut self.backbone);
        *self = rounded;
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}
