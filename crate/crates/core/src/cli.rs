//! Command-line driver.
//!
//! Configuration is flat `key = value` text; `--key value` flags override the
//! file. Each subcommand lists the keys it needs, and unknown keys are
//! rejected everywhere.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::{pretrain_backbone, BackboneConfig, BackboneParams, PretrainOptions, Video};
use crate::error::{Error, Result};
use crate::eval::{self, RecallMatrix, Scoring};
use crate::featuredb;
use crate::harness::{self, Ablation, Harness, RunConfig};
use crate::model::CtvrModel;
use crate::numerics::{Graph, Tensor};
use crate::taskgen::{self, Pair, Split, StreamConfig, TaskStream, World, WorldConfig};
use crate::tame::Role;

pub const USAGE: &str = "\
usage: ctvr <command> [--config FILE] [--key value ...]

commands:
  pretrain      train and freeze the backbone; writes --backbone
  run           run the continual stream; writes into --report_dir
  eval          score a checkpoint: --store --manifest --ckpt [--report] [--ledger]
  ablate        run the full model and each single ablation into --report_dir
  export-attn   attention maps of one video: --ckpt --manifest --video_id --layer --out
  export-drift  query drift across checkpoints: --ckpts a,b,... --manifest --out
";

const STREAM_KEYS: &[&str] = &[
    "seed",
    "world_seed",
    "tasks",
    "cats_per_task",
    "videos_per_cat",
    "test_per_cat",
    "frames",
    "query_len",
    "base_categories",
];

const TRAIN_KEYS: &[&str] = &[
    "epochs", "batch", "lr", "beta", "tau", "ffa_depth", "experts", "k", "rank", "lambda", "roles", "refs",
    "no_ffa", "no_tame", "no_tp", "no_ct", "scoring",
];

const BACKBONE_KEYS: &[&str] = &[
    "width",
    "heads",
    "vision_layers",
    "text_layers",
    "patches",
    "input_width",
    "vocab",
    "context",
    "mlp_ratio",
    "ln_eps",
    "tau_pre",
    "pretrain_epochs",
    "pretrain_batch",
    "pretrain_lr",
    "pretrain_seed",
];

const PATH_KEYS: &[&str] = &[
    "backbone", "store", "manifest", "ckpt", "ckpts", "report", "report_dir", "ledger", "out", "layer", "video_id",
];

/// Failure of a CLI invocation, split by exit status.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CliConfig {
    values: BTreeMap<String, String>,
}

fn known(key: &str) -> bool {
    [STREAM_KEYS, TRAIN_KEYS, BACKBONE_KEYS, PATH_KEYS].iter().any(|set| set.contains(&key))
}

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}

impl CliConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse_text(text: &str) -> CliResult<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return usage(format!("config line {}: expected key = value", n + 1));
            };
            cfg.set(&normalize(k), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        if !known(key) {
            return usage(format!("unknown config key {key}"));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Reads `--config` first, then applies every other flag on top.
    pub fn from_args(args: &[String]) -> CliResult<Self> {
        let mut flags = Vec::new();
        let mut file = None;
        let mut i = 0;
        while i < args.len() {
            let Some(stripped) = args[i].strip_prefix("--") else {
                return usage(format!("unexpected argument {}", args[i]));
            };
            let (key, value) = match stripped.split_once('=') {
                Some((k, v)) => (normalize(k), v.to_string()),
                None => {
                    let v = args
                        .get(i + 1)
                        .cloned()
                        .ok_or_else(|| CliError::Usage(format!("flag --{stripped} needs a value")))?;
                    i += 1;
                    (normalize(stripped), v)
                }
            };
            if key == "config" {
                file = Some(value);
            } else {
                flags.push((key, value));
            }
            i += 1;
        }
        let mut cfg = match file {
            Some(path) => {
                let text = fs::read_to_string(&path).map_err(|e| CliError::Usage(format!("cannot read config {path}: {e}")))?;
                Self::parse_text(&text)?
            }
            None => Self::default(),
        };
        for (k, v) in flags {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn require(&self, keys: &[&str]) -> CliResult<()> {
        match keys.iter().find(|k| !self.values.contains_key(**k)) {
            Some(k) => usage(format!("missing config key {k}")),
            None => Ok(()),
        }
    }

    pub fn raw(&self, key: &str) -> CliResult<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CliError::Usage(format!("missing config key {key}")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> CliResult<T> {
        let raw = self.raw(key)?;
        raw.parse()
            .map_err(|_| CliError::Usage(format!("config key {key}: cannot parse {raw:?}")))
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> CliResult<T> {
        if self.values.contains_key(key) {
            self.get(key)
        } else {
            Ok(default)
        }
    }

    pub fn path(&self, key: &str) -> CliResult<PathBuf> {
        Ok(PathBuf::from(self.raw(key)?))
    }

    pub fn backbone_config(&self) -> CliResult<BackboneConfig> {
        self.require(BACKBONE_KEYS)?;
        Ok(BackboneConfig {
            width: self.get("width")?,
            heads: self.get("heads")?,
            vision_layers: self.get("vision_layers")?,
            text_layers: self.get("text_layers")?,
            patches: self.get("patches")?,
            input_width: self.get("input_width")?,
            vocab: self.get("vocab")?,
            context: self.get("context")?,
            mlp_ratio: self.get("mlp_ratio")?,
            ln_eps: self.get("ln_eps")?,
            tau_pre: self.get("tau_pre")?,
        })
    }

    pub fn stream_config(&self, bb: &BackboneConfig) -> CliResult<StreamConfig> {
        self.require(STREAM_KEYS)?;
        Ok(StreamConfig {
            world: WorldConfig::for_backbone(self.get("world_seed")?, bb),
            seed: self.get("seed")?,
            tasks: self.get("tasks")?,
            cats_per_task: self.get("cats_per_task")?,
            videos_per_cat: self.get("videos_per_cat")?,
            test_per_cat: self.get("test_per_cat")?,
            frames: self.get("frames")?,
            query_len: self.get("query_len")?,
            base_categories: self.get("base_categories")?,
        })
    }

    pub fn run_config(&self) -> CliResult<RunConfig> {
        self.require(TRAIN_KEYS)?;
        self.require(&["seed"])?;
        let roles = self
            .raw("roles")?
            .split(',')
            .map(|r| Role::from_str(r.trim()))
            .collect::<Result<Vec<_>>>()?;
        let scoring: Scoring = self.raw("scoring")?.parse()?;
        Ok(RunConfig {
            epochs: self.get("epochs")?,
            batch: self.get("batch")?,
            lr: self.get("lr")?,
            beta: self.get("beta")?,
            tau: self.get("tau")?,
            ffa_depth: self.get("ffa_depth")?,
            experts: self.get("experts")?,
            k: self.get("k")?,
            rank: self.get("rank")?,
            lambda: self.get("lambda")?,
            roles,
            refs: self.get("refs")?,
            ablation: Ablation {
                no_ffa: self.get("no_ffa")?,
                no_tame: self.get("no_tame")?,
                no_tp: self.get("no_tp")?,
                no_ct: self.get("no_ct")?,
            },
            seed: self.get("seed")?,
            scoring,
        })
    }
}

/// Runs one invocation, printing to stdout/stderr. Returns the exit status.
pub fn run_cli(argv: &[String]) -> i32 {
    let Some(cmd) = argv.get(1) else {
        eprint!("{USAGE}");
        return 2;
    };
    let rest = &argv[2..];
    let result = CliConfig::from_args(rest).and_then(|cfg| match cmd.as_str() {
        "pretrain" => cmd_pretrain(&cfg),
        "run" => cmd_run(&cfg),
        "eval" => cmd_eval(&cfg),
        "ablate" => cmd_ablate(&cfg),
        "export-attn" => cmd_export_attn(&cfg),
        "export-drift" => cmd_export_drift(&cfg),
        "help" | "--help" | "-h" => {
            print!("{USAGE}");
            Ok(())
        }
        other => usage(format!("unknown command {other}")),
    });
    match result {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprint!("{USAGE}");
            2
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn cmd_pretrain(cfg: &CliConfig) -> CliResult<()> {
    let bb_cfg = cfg.backbone_config()?;
    let sc = cfg.stream_config(&bb_cfg)?;
    let out = cfg.path("backbone")?;
    let opts = PretrainOptions {
        epochs: cfg.get("pretrain_epochs")?,
        batch: cfg.get("pretrain_batch")?,
        lr: cfg.get("pretrain_lr")?,
        seed: cfg.get("pretrain_seed")?,
    };
    let base = TaskStream::base_pairs_with_videos(&sc)?;
    let bb = pretrain_backbone(&base, bb_cfg, &opts)?;
    bb.save(&out)?;
    let r1 = harness::base_recall(&bb, &base)?;
    println!(
        "backbone {} checksum {} base R@1 {r1:.2} (chance {:.2})",
        out.display(),
        bb.checksum(),
        100.0 / base.len() as f64
    );
    Ok(())
}

fn load_run(cfg: &CliConfig) -> CliResult<(BackboneParams, TaskStream, RunConfig, PathBuf)> {
    let bb = BackboneParams::load(&cfg.path("backbone")?)?;
    let sc = cfg.stream_config(&bb.config)?;
    let rc = cfg.run_config()?;
    let dir = cfg.path("report_dir")?;
    let stream = TaskStream::generate(&sc)?;
    Ok((bb, stream, rc, dir))
}

fn run_variant(stream: &TaskStream, rc: RunConfig, bb: BackboneParams, dir: &Path) -> CliResult<eval::MetricsReport> {
    fs::create_dir_all(dir).map_err(Error::from)?;
    let mut manifest = Vec::new();
    taskgen::write_manifest(&mut manifest, stream.pairs())?;
    fs::write(dir.join("manifest.jsonl"), manifest).map_err(Error::from)?;
    let checksum = bb.checksum();
    let mut h = Harness::new(stream, rc, bb, Some(dir))?;
    let report = h.run()?;
    if h.model.backbone.checksum() != checksum {
        return Err(Error::Protocol("backbone changed during the run".into()).into());
    }
    Ok(report)
}

fn cmd_run(cfg: &CliConfig) -> CliResult<()> {
    let (bb, stream, rc, dir) = load_run(cfg)?;
    let report = run_variant(&stream, rc, bb, &dir)?;
    println!(
        "R@1 {:.2} R@5 {:.2} R@10 {:.2} MedR {:.2} MeanR {:.2} BWF {:.2}",
        report.r1, report.r5, report.r10, report.medr, report.meanr, report.bwf
    );
    Ok(())
}

fn cmd_ablate(cfg: &CliConfig) -> CliResult<()> {
    let (bb, stream, rc, dir) = load_run(cfg)?;
    let variants = [
        Ablation::default(),
        Ablation { no_ffa: true, ..Ablation::default() },
        Ablation { no_tame: true, ..Ablation::default() },
        Ablation { no_tp: true, ..Ablation::default() },
        Ablation { no_ct: true, ..Ablation::default() },
    ];
    let mut summary = String::from("variant,r1,r5,r10,medr,meanr,bwf\n");
    for ab in variants {
        let name = ab.name();
        let report = run_variant(&stream, RunConfig { ablation: ab, ..rc.clone() }, bb.clone(), &dir.join(&name))?;
        writeln!(
            summary,
            "{name},{},{},{},{},{},{}",
            report.r1, report.r5, report.r10, report.medr, report.meanr, report.bwf
        )
        .expect("string write");
    }
    fs::write(dir.join("ablation.csv"), &summary).map_err(Error::from)?;
    print!("{summary}");
    Ok(())
}

fn read_manifest(path: &Path) -> Result<Vec<Pair>> {
    taskgen::read_manifest(BufReader::new(fs::File::open(path)?))
}

fn cmd_eval(cfg: &CliConfig) -> CliResult<()> {
    cfg.require(&["store", "manifest", "ckpt"])?;
    let store = featuredb::read_store(&cfg.path("store")?)?;
    let pairs = read_manifest(&cfg.path("manifest")?)?;
    let model = CtvrModel::load(&cfg.path("ckpt")?)?;
    let scoring: Scoring = cfg.get_or("scoring", "task_matched".to_string())?.parse()?;
    let up_to = store.max_task();
    let queries: Vec<&Pair> = pairs
        .iter()
        .filter(|p| p.split == Split::Test && p.task >= 1 && p.task <= up_to as usize)
        .collect();
    let (mut report, _) = harness::evaluate_pool(&model, &store, up_to, &queries, scoring)?;
    if cfg.values.contains_key("ledger") {
        let mut rows = read_ledger(&cfg.path("ledger")?)?;
        rows.truncate(up_to as usize - 1);
        rows.push((1..=up_to as usize).map(|i| report.per_task.get(&i).copied().unwrap_or(0.0)).collect());
        let matrix = RecallMatrix::from_rows(rows)?;
        report.bwf = eval::backward_forgetting(&matrix, up_to as usize)?;
    }
    let out = cfg.get_or("report", "report.json".to_string())?;
    fs::write(&out, harness::report_json(&report)).map_err(Error::from)?;
    println!("wrote {out}");
    Ok(())
}

fn read_ledger(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Format(e.to_string()))?;
        let field = |k: &str| v.get(k).and_then(serde_json::Value::as_f64).ok_or_else(|| Error::Format(format!("ledger line lacks {k}")));
        let (t, i, r1) = (field("t")? as usize, field("i")? as usize, field("r1")?);
        if rows.len() < t {
            rows.resize(t, Vec::new());
        }
        if rows[t - 1].len() + 1 != i {
            return Err(Error::Format("ledger entries out of order".into()));
        }
        rows[t - 1].push(r1);
    }
    Ok(rows)
}

fn regenerate_video(cfg: &CliConfig, model: &CtvrModel, pair: &Pair) -> CliResult<Video> {
    cfg.require(&["world_seed", "frames"])?;
    let wc = WorldConfig::for_backbone(cfg.get("world_seed")?, &model.backbone.config);
    let world = World::new(wc, pair.category as usize + 1)?;
    let frames: usize = cfg.get("frames")?;
    Ok(world.pair_from_seed(pair.category, pair.video_seed, frames, pair.query_tokens.len().saturating_sub(1))?.1)
}

fn cmd_export_attn(cfg: &CliConfig) -> CliResult<()> {
    cfg.require(&["ckpt", "manifest", "video_id", "layer", "out"])?;
    let model = CtvrModel::load(&cfg.path("ckpt")?)?;
    let layer: usize = cfg.get("layer")?;
    if layer >= model.ffa.attach_depth {
        return usage(format!(
            "layer {layer} outside the {} adapted blocks",
            model.ffa.attach_depth
        ));
    }
    let video_id: u64 = cfg.get("video_id")?;
    let pairs = read_manifest(&cfg.path("manifest")?)?;
    let pair = pairs
        .iter()
        .find(|p| p.video_id == video_id)
        .ok_or_else(|| CliError::Usage(format!("video {video_id} not in manifest")))?;
    let video = regenerate_video(cfg, &model, pair)?;
    let table = attention_table(&model, &video, layer)?;
    fs::write(cfg.path("out")?, table).map_err(Error::from)?;
    Ok(())
}

/// Head-averaged spatial (`sa`) and temporal (`ca`) attention of one block,
/// one CSV row per query token.
pub fn attention_table(model: &CtvrModel, video: &Video, layer: usize) -> Result<String> {
    let hook = model
        .ffa_hook()
        .filter(|_| layer < model.ffa.attach_depth)
        .ok_or_else(|| Error::Usage(format!("layer {layer} carries no adapter")))?;
    let mut g = Graph::new();
    let pass = model.backbone.vision_graph(&mut g, &[video], Some(hook))?;
    let alpha = model.ffa_params.get(&crate::ffa::param_name(layer, "alpha"))?.data()[0];
    let lt = model.backbone.config.frame_tokens();
    let mut out = String::from("frame_prev,frame_cur,kind,row,alpha");
    for j in 0..lt {
        write!(out, ",c{j}").expect("string write");
    }
    out.push('\n');
    for (kind, var) in [("ca", pass.cross_attention[layer]), ("sa", pass.self_attention[layer])] {
        let (probs, shape) = g.attention_probs(var).expect("attention node");
        for m in 0..video.frames() {
            let prev = if kind == "ca" { m.saturating_sub(1) } else { m };
            let mat: Tensor = crate::ffa::head_average(probs, shape.heads, shape.q_len, shape.kv_len, m);
            for r in 0..lt {
                write!(out, "{prev},{m},{kind},{r},{alpha}").expect("string write");
                for v in mat.row(r) {
                    write!(out, ",{v}").expect("string write");
                }
                out.push('\n');
            }
        }
    }
    Ok(out)
}

fn cmd_export_drift(cfg: &CliConfig) -> CliResult<()> {
    cfg.require(&["ckpts", "manifest", "out"])?;
    let paths: Vec<PathBuf> = cfg.raw("ckpts")?.split(',').map(|s| PathBuf::from(s.trim())).collect();
    if paths.is_empty() || paths.iter().any(|p| p.as_os_str().is_empty()) {
        return usage("ckpts needs at least one checkpoint");
    }
    let models = paths.iter().map(|p| CtvrModel::load(p)).collect::<Result<Vec<_>>>()?;
    let pairs = read_manifest(&cfg.path("manifest")?)?;
    let queries: Vec<&Pair> = pairs.iter().filter(|p| p.split == Split::Test).collect();
    let table = drift_table(&models, &queries)?;
    fs::write(cfg.path("out")?, table).map_err(Error::from)?;
    Ok(())
}

/// One row per (query, checkpoint) holding the query's feature under its own
/// task prototype and its L2 distance to the feature at the first checkpoint
/// that contains that prototype. Queries of tasks a checkpoint has not seen
/// are skipped for that checkpoint.
pub fn drift_table(models: &[CtvrModel], queries: &[&Pair]) -> Result<String> {
    let width = models.first().map_or(0, CtvrModel::width);
    let mut out = String::from("video_id,task,checkpoint,drift");
    for j in 0..width {
        write!(out, ",f{j}").expect("string write");
    }
    out.push('\n');
    let mut origin: BTreeMap<u64, Tensor> = BTreeMap::new();
    for (c, model) in models.iter().enumerate() {
        for pair in queries {
            if pair.task == 0 || pair.task > model.bank.len() {
                continue;
            }
            let q = model.query_features(&[pair.query_tokens.as_slice()], pair.task)?;
            let base = origin.entry(pair.video_id).or_insert_with(|| q.clone());
            let drift = q
                .data()
                .iter()
                .zip(base.data())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            write!(out, "{},{},{c},{drift}", pair.video_id, pair.task).expect("string write");
            for v in q.data() {
                write!(out, ",{v}").expect("string write");
            }
            out.push('\n');
        }
    }
    Ok(out)
}
