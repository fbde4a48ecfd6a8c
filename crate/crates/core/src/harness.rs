//! Sequential-task orchestration under restricted data access.
//!
//! For each task `t` the harness trains the adapters on `D_t` alone, extracts
//! the test-split video features once into the feature store, and evaluates
//! every seen task's queries against the union of stored features.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{BackboneParams, TameHook, Video};
use crate::error::{Error, Result};
use crate::eval::{self, backward_forgetting, MetricsReport, RecallMatrix, Scoring};
use crate::featuredb::{self, FeatureStore, VideoFeatureRecord};
use crate::losses;
use crate::model::{AdapterConfig, CtvrModel};
use crate::numerics::{cosine_lr, split_grads, Graph, Optimizer, Scheme, Tensor};
use crate::taskgen::{Pair, Split, TaskStream};
use crate::tame::{prototype_name, Role, TameConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    pub no_ffa: bool,
    pub no_tame: bool,
    pub no_tp: bool,
    pub no_ct: bool,
}

impl Ablation {
    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        for (on, n) in [
            (self.no_ffa, "no_ffa"),
            (self.no_tame, "no_tame"),
            (self.no_tp, "no_tp"),
            (self.no_ct, "no_ct"),
        ] {
            if on {
                parts.push(n);
            }
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta: f64,
    pub tau: f64,
    pub ffa_depth: usize,
    pub experts: usize,
    pub k: usize,
    pub rank: usize,
    pub lambda: f64,
    pub roles: Vec<Role>,
    /// Upper bound on reference negatives drawn per step.
    pub refs: usize,
    pub ablation: Ablation,
    pub seed: u64,
    pub scoring: Scoring,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch: 16,
            lr: 2e-3,
            beta: losses::DEFAULT_BETA,
            tau: losses::DEFAULT_TAU,
            ffa_depth: 2,
            experts: 5,
            k: 2,
            rank: 4,
            lambda: 0.1,
            roles: vec![Role::Q, Role::V],
            refs: 64,
            ablation: Ablation::default(),
            seed: 0,
            scoring: Scoring::TaskMatched,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch < 2 {
            return Err(Error::Config("epochs must be >= 1 and batch >= 2".into()));
        }
        if !(self.lr > 0.0) || !(self.tau > 0.0) {
            return Err(Error::Config("lr and tau must be positive".into()));
        }
        losses::check_beta(self.beta)?;
        self.tame_config(1).validate()?;
        Ok(())
    }

    fn tame_config(&self, width: usize) -> TameConfig {
        TameConfig {
            experts: self.experts,
            k: self.k,
            rank: self.rank,
            lambda: self.lambda,
            roles: self.roles.clone(),
            width,
        }
    }

    /// Adapter layout after applying the ablation flags.
    pub fn adapter_config(&self, width: usize) -> AdapterConfig {
        let a = self.ablation;
        AdapterConfig {
            ffa_depth: if a.no_ffa { 0 } else { self.ffa_depth },
            tame: (!a.no_tame).then(|| self.tame_config(width)),
            pin_prototypes: a.no_tp,
        }
    }

    /// Loss mix for task `t`: no cross-task term on the first task or under `no_ct`.
    pub fn beta_for(&self, t: usize) -> f64 {
        if t <= 1 || self.ablation.no_ct {
            0.0
        } else {
            self.beta
        }
    }
}

/// Builds the model variant the configuration asks for.
pub fn apply_ablation(cfg: &RunConfig, backbone: BackboneParams) -> Result<CtvrModel> {
    let adapters = cfg.adapter_config(backbone.config.width);
    CtvrModel::new(backbone, &adapters, cfg.seed)
}

/// Raw-data gate over a stream. Training pairs and test videos are only
/// served for the open task; test queries of any seen task stay readable.
#[derive(Debug)]
pub struct StreamAccess<'a> {
    stream: &'a TaskStream,
    open: usize,
    log: RefCell<AccessLog>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AccessLog {
    /// `(task, kind) -> reads`.
    pub reads: BTreeMap<(usize, &'static str), usize>,
    /// Requests for raw data of a task that was already closed.
    pub denied: usize,
}

impl<'a> StreamAccess<'a> {
    pub fn new(stream: &'a TaskStream) -> Self {
        Self {
            stream,
            open: 0,
            log: RefCell::new(AccessLog::default()),
        }
    }

    pub fn open_task(&mut self, t: usize) -> Result<()> {
        if t != self.open + 1 || t > self.stream.tasks.len() {
            return Err(Error::Protocol(format!("cannot open task {t} after task {}", self.open)));
        }
        self.open = t;
        Ok(())
    }

    pub fn open(&self) -> usize {
        self.open
    }

    fn guard(&self, t: usize, kind: &'static str) -> Result<()> {
        if t != self.open {
            self.log.borrow_mut().denied += 1;
            return Err(Error::Protocol(format!(
                "{kind} of task {t} requested while task {} is open",
                self.open
            )));
        }
        *self.log.borrow_mut().reads.entry((t, kind)).or_default() += 1;
        Ok(())
    }

    pub fn train_pairs(&self, t: usize) -> Result<Vec<&'a Pair>> {
        self.guard(t, "train")?;
        Ok(self.stream.task(t)?.split(Split::Train).collect())
    }

    pub fn test_videos(&self, t: usize) -> Result<Vec<(&'a Pair, Video)>> {
        self.guard(t, "test_videos")?;
        self.stream
            .task(t)?
            .split(Split::Test)
            .map(|p| Ok((p, self.stream.video(p)?)))
            .collect()
    }

    pub fn video(&self, t: usize, pair: &Pair) -> Result<Video> {
        self.guard(t, "video")?;
        self.stream.video(pair)
    }

    pub fn test_queries(&self, t: usize) -> Result<Vec<&'a Pair>> {
        if t == 0 || t > self.open {
            return Err(Error::Protocol(format!("queries of unseen task {t}")));
        }
        *self.log.borrow_mut().reads.entry((t, "test_queries")).or_default() += 1;
        Ok(self.stream.task(t)?.split(Split::Test).collect())
    }

    pub fn log(&self) -> AccessLog {
        self.log.borrow().clone()
    }

    /// Raw training or video reads of task `i` made while a later task was open.
    pub fn stale_reads(&self) -> usize {
        self.log.borrow().denied
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunLedger {
    pub recall: RecallMatrix,
    pub reports: Vec<MetricsReport>,
}

#[derive(Serialize)]
struct LedgerRecord {
    t: usize,
    i: usize,
    r1: f64,
}

impl RunLedger {
    /// One JSON line per `(t, i)` entry of the R@1 matrix.
    pub fn export(&self) -> String {
        let mut out = String::new();
        for (t, row) in self.recall.rows().iter().enumerate() {
            for (i, &r1) in row.iter().enumerate() {
                let rec = LedgerRecord { t: t + 1, i: i + 1, r1 };
                out.push_str(&serde_json::to_string(&rec).expect("plain record"));
                out.push('\n');
            }
        }
        out
    }
}

pub fn report_json(report: &MetricsReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("plain report");
    s.push('\n');
    s
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskStats {
    pub epoch_losses: Vec<f64>,
}

/// Drives one model through a stream.
pub struct Harness<'a> {
    pub cfg: RunConfig,
    pub access: StreamAccess<'a>,
    pub model: CtvrModel,
    pub store: FeatureStore,
    pub ledger: RunLedger,
    pub stats: Vec<TaskStats>,
    out_dir: Option<PathBuf>,
    trained: usize,
    extracted: usize,
    /// Extractions requested for tasks before the latest extracted one.
    pub reextractions: usize,
    /// Times the loss sampled reference features from the store.
    pub store_reads: usize,
}

impl<'a> Harness<'a> {
    pub fn new(stream: &'a TaskStream, cfg: RunConfig, backbone: BackboneParams, out_dir: Option<&Path>) -> Result<Self> {
        cfg.validate()?;
        let width = backbone.config.width;
        let model = apply_ablation(&cfg, backbone)?;
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir)?;
            let store = dir.join("features.fdb");
            if store.exists() {
                return Err(Error::Usage(format!("{} already exists", store.display())));
            }
        }
        Ok(Self {
            cfg,
            access: StreamAccess::new(stream),
            model,
            store: FeatureStore::new(width)?,
            ledger: RunLedger::default(),
            stats: Vec::new(),
            out_dir: out_dir.map(Path::to_path_buf),
            trained: 0,
            extracted: 0,
            reextractions: 0,
            store_reads: 0,
        })
    }

    fn task_rng(&self, t: usize, salt: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((t as u64) << 8) ^ salt)
    }

    /// Trains adapters and the prototype of task `t` on `D_t` only.
    pub fn train_task(&mut self, t: usize) -> Result<TaskStats> {
        if t != self.trained + 1 || self.extracted != self.trained {
            return Err(Error::Protocol(format!(
                "task {t} trained out of order (trained {}, extracted {})",
                self.trained, self.extracted
            )));
        }
        self.access.open_task(t)?;
        self.model.begin_task(t)?;
        let pairs = self.access.train_pairs(t)?;
        let videos: Vec<Video> = pairs.iter().map(|p| self.access.video(t, p)).collect::<Result<_>>()?;
        let frozen_features = if self.model.video_path_trainable() {
            None
        } else {
            let refs: Vec<&Video> = videos.iter().collect();
            Some(self.model.video_features(&refs, 16)?)
        };
        let beta = self.cfg.beta_for(t);
        let mut rng = self.task_rng(t, 1);
        let mut optims = [
            Optimizer::new(Scheme::adam()),
            Optimizer::new(Scheme::adam()),
            Optimizer::new(Scheme::adam()),
        ];
        let proto = prototype_name(t);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut stats = TaskStats::default();
        for epoch in 0..self.cfg.epochs {
            let lr = cosine_lr(self.cfg.lr, epoch, self.cfg.epochs);
            order.shuffle(&mut rng);
            let (mut total, mut batches) = (0.0, 0usize);
            for chunk in order.chunks(self.cfg.batch) {
                if chunk.len() < 2 {
                    continue;
                }
                let refs = if beta > 0.0 { self.sample_refs(t, &mut rng) } else { None };
                let mut g = Graph::new();
                let v = match &frozen_features {
                    Some(f) => {
                        let rows: Vec<f64> = chunk.iter().flat_map(|&i| f.row(i).to_vec()).collect();
                        g.constant(Tensor::new(vec![chunk.len(), f.as_matrix().1], rows)?)
                    }
                    None => {
                        let batch: Vec<&Video> = chunk.iter().map(|&i| &videos[i]).collect();
                        self.model
                            .backbone
                            .vision_graph(&mut g, &batch, self.model.ffa_hook())?
                            .features
                    }
                };
                let queries: Vec<&[u32]> = chunk.iter().map(|&i| pairs[i].query_tokens.as_slice()).collect();
                let hook = match &self.model.tame {
                    Some(config) => Some(TameHook {
                        config,
                        params: &self.model.tame_params,
                        prototype: Some(g.use_param(self.model.bank.params(), &proto)?),
                    }),
                    None => None,
                };
                let q = self.model.backbone.text_graph(&mut g, &queries, hook)?.eos;
                let r = refs.map(|r| g.constant(r));
                let loss = losses::total_graph(&mut g, q, v, r, self.cfg.tau, beta)?;
                total += g.value(loss).data()[0];
                batches += 1;
                let mut grads = g.backward(loss)?;
                let ffa = split_grads(&mut grads, "ffa.");
                let tame = split_grads(&mut grads, "tame.");
                let protos = split_grads(&mut grads, "proto.");
                if !grads.is_empty() {
                    return Err(Error::Usage(format!(
                        "gradient reached non-adapter parameter {}",
                        grads.keys().next().unwrap()
                    )));
                }
                optims[0].step(&mut self.model.ffa_params, &ffa, lr)?;
                optims[1].step(&mut self.model.tame_params, &tame, lr)?;
                optims[2].step(self.model.bank.params_mut(), &protos, lr)?;
            }
            stats.epoch_losses.push(if batches > 0 { total / batches as f64 } else { 0.0 });
        }
        self.model.round_to_checkpoint()?;
        self.trained = t;
        self.stats.push(stats.clone());
        Ok(stats)
    }

    /// Up to `refs` stored features of tasks before `t`, sampled without replacement.
    fn sample_refs(&mut self, t: usize, rng: &mut ChaCha8Rng) -> Option<Tensor> {
        let block = self.store.load_range(t as u32 - 1);
        let features = block.features?;
        self.store_reads += 1;
        let n = block.video_ids.len();
        let take = self.cfg.refs.min(n);
        if take == 0 {
            return None;
        }
        let mut picked = index::sample(rng, n, take).into_vec();
        picked.sort_unstable();
        let w = features.as_matrix().1;
        let data = picked.iter().flat_map(|&i| features.row(i).to_vec()).collect();
        Some(Tensor::new(vec![take, w], data).expect("nonempty sample"))
    }

    /// Extracts task `t`'s test-split features with the current model and
    /// appends them to the store. Runs once per task.
    pub fn extract_and_store(&mut self, t: usize) -> Result<()> {
        if t <= self.extracted {
            self.reextractions += 1;
            return Err(Error::Protocol(format!("task {t} already extracted")));
        }
        if t != self.trained {
            return Err(Error::Protocol(format!("extract task {t} right after training it")));
        }
        let tests = self.access.test_videos(t)?;
        let videos: Vec<&Video> = tests.iter().map(|(_, v)| v).collect();
        let feats = self.model.video_features(&videos, 16)?;
        let records: Vec<VideoFeatureRecord> = tests
            .iter()
            .enumerate()
            .map(|(i, (p, _))| VideoFeatureRecord {
                task: t as u32,
                video_id: p.video_id,
                category: p.category,
                feature: feats.row(i).iter().map(|&v| v as f32).collect(),
            })
            .collect();
        match &self.out_dir {
            Some(dir) => {
                self.store = featuredb::append_file(&dir.join("features.fdb"), self.store.width(), t as u32, records)?;
            }
            None => self.store.append_task_features(t as u32, records)?,
        }
        self.extracted = t;
        Ok(())
    }

    /// Scores every seen task's test queries against the stored pool and
    /// fills ledger row `t`.
    pub fn evaluate_checkpoint(&mut self, t: usize) -> Result<MetricsReport> {
        if t != self.extracted || self.ledger.recall.tasks() + 1 != t {
            return Err(Error::Protocol(format!("evaluate task {t} after extracting it")));
        }
        let queries: Vec<&Pair> = (1..=t)
            .map(|i| self.access.test_queries(i))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        let (mut report, _) = evaluate_pool(&self.model, &self.store, t as u32, &queries, self.cfg.scoring)?;
        let row: Vec<f64> = (1..=t).map(|i| report.per_task.get(&i).copied().unwrap_or(0.0)).collect();
        self.ledger.recall.push_row(row)?;
        report.bwf = backward_forgetting(&self.ledger.recall, t)?;
        self.ledger.reports.push(report.clone());
        if let Some(dir) = &self.out_dir {
            self.model.save(&dir.join(format!("model_t{t}.bin")))?;
            fs::write(dir.join("ledger.jsonl"), self.ledger.export())?;
            fs::write(dir.join(format!("report_t{t}.json")), report_json(&report))?;
        }
        Ok(report)
    }

    pub fn run(&mut self) -> Result<MetricsReport> {
        let tasks = self.access.stream.tasks.len();
        let mut last = None;
        for t in 1..=tasks {
            self.train_task(t)?;
            self.extract_and_store(t)?;
            last = Some(self.evaluate_checkpoint(t)?);
        }
        let report = last.ok_or_else(|| Error::Usage("stream has no tasks".into()))?;
        if let Some(dir) = &self.out_dir {
            fs::write(dir.join("report.json"), report_json(&report))?;
        }
        Ok(report)
    }
}

/// Ranks every query's ground-truth video within `V_[1:up_to]`. Returns the
/// report (with `bwf` left at 0) and the per-query ranks.
pub fn evaluate_pool(
    model: &CtvrModel,
    store: &FeatureStore,
    up_to: u32,
    queries: &[&Pair],
    scoring: Scoring,
) -> Result<(MetricsReport, Vec<usize>)> {
    let block = store.load_range(up_to);
    let pool = block
        .features
        .as_ref()
        .ok_or_else(|| Error::Protocol("feature store holds no videos".into()))?;
    if queries.is_empty() {
        return Err(Error::Usage("no queries to evaluate".into()));
    }
    let index: BTreeMap<u64, usize> = block.video_ids.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let tokens: Vec<&[u32]> = queries.iter().map(|p| p.query_tokens.as_slice()).collect();
    let sweep = model.conditional_query_sweep(&tokens)?;
    if sweep.len() < up_to as usize {
        return Err(Error::Protocol(format!("{} prototypes for {up_to} stored tasks", sweep.len())));
    }
    let o = model.width();
    let mut zero_norm = (0..block.len())
        .filter(|&j| pool.row(j).iter().all(|&v| v == 0.0))
        .count();
    let mut ranks = Vec::with_capacity(queries.len());
    for (qi, pair) in queries.iter().enumerate() {
        let target = *index
            .get(&pair.video_id)
            .ok_or_else(|| Error::Input(format!("video {} missing from the store", pair.video_id)))?;
        let conditional: Vec<Tensor> = sweep
            .iter()
            .map(|s| Tensor::new(vec![o], s.row(qi).to_vec()))
            .collect::<Result<_>>()?;
        zero_norm += conditional.iter().filter(|q| q.data().iter().all(|&v| v == 0.0)).count();
        let scores = match scoring {
            Scoring::TaskMatched => eval::task_matched_scores(&conditional, pool, &block.tasks)?,
            Scoring::MaxPrototype => eval::max_prototype_scores(&conditional, pool),
        };
        ranks.push(eval::rank_of(&scores, target));
    }
    let tasks: Vec<usize> = queries.iter().map(|p| p.task).collect();
    let report = eval::summarize(&ranks, &tasks, 0.0, zero_norm)?;
    Ok((report, ranks))
}

/// R@1 (percent) of the frozen towers on `(query, video)` pairs, each query
/// ranked against every video of the set.
pub fn base_recall(backbone: &BackboneParams, pairs: &[(Vec<u32>, Video)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Usage("no pairs to score".into()));
    }
    let o = backbone.config.width;
    let mut videos = Vec::with_capacity(pairs.len() * o);
    let mut queries = Vec::with_capacity(pairs.len() * o);
    for part in pairs.chunks(16) {
        let mut g = Graph::new();
        let refs: Vec<&Video> = part.iter().map(|(_, v)| v).collect();
        let pass = backbone.vision_graph(&mut g, &refs, None)?;
        videos.extend_from_slice(g.value(pass.features).data());
        let ids: Vec<&[u32]> = part.iter().map(|(q, _)| q.as_slice()).collect();
        let pass = backbone.text_graph(&mut g, &ids, None)?;
        queries.extend_from_slice(g.value(pass.eos).data());
    }
    let pool = Tensor::new(vec![pairs.len(), o], videos)?;
    let ranks: Vec<usize> = (0..pairs.len())
        .map(|i| {
            let q = &queries[i * o..(i + 1) * o];
            let scores: Vec<f64> = (0..pairs.len()).map(|j| eval::cosine(q, pool.row(j))).collect();
            eval::rank_of(&scores, i)
        })
        .collect();
    Ok(eval::recall_at_k(&ranks, 1))
}
