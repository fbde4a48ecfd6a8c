//! Deterministic synthetic task streams.
//!
//! A [`World`] fixes everything shared across streams: per-patch projections
//! from a small latent space into patch features, token latents, and the
//! category latents themselves. Category ids `0..base_categories` form the
//! pretraining split; continual tasks draw from the ids after them.
//!
//! A video instance is `center + offset` with a drift direction; frame `m`
//! sits at `z + (m − (M−1)/2)·drift + noise`. Its query samples words from
//! the category's support, weighted by affinity with `z + motion·drift`, so
//! part of what a query says is only visible through frame-to-frame change.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, Video};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Shape and noise levels of the synthetic world.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub seed: u64,
    pub latent: usize,
    pub patches: usize,
    pub input_width: usize,
    pub vocab: usize,
    /// Words per category support.
    pub support: usize,
    pub min_center_distance: f64,
    pub instance_std: f64,
    pub drift_std: f64,
    pub frame_std: f64,
    pub patch_std: f64,
    /// Weight of the drift direction in a query's word preferences.
    pub motion: f64,
    pub word_temperature: f64,
}

impl WorldConfig {
    pub fn for_backbone(seed: u64, bb: &BackboneConfig) -> Self {
        Self {
            seed,
            latent: 16,
            patches: bb.patches,
            input_width: bb.input_width,
            vocab: bb.vocab,
            support: 16,
            min_center_distance: 2.0,
            instance_std: 0.6,
            drift_std: 0.3,
            frame_std: 0.3,
            patch_std: 0.3,
            motion: 2.0,
            word_temperature: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoryLatent {
    pub id: u32,
    pub video_center: Tensor,
    pub drift: Tensor,
    /// Support words and their base weights; sums to 1.
    pub token_profile: Vec<(u32, f64)>,
}

/// One sampled video/query source inside a category.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub latent: Tensor,
    pub drift: Tensor,
}

#[derive(Clone, Debug)]
pub struct World {
    pub config: WorldConfig,
    /// `P` matrices of shape `[input_width, latent]`.
    patch_proj: Vec<Tensor>,
    /// `[vocab, latent]`; rows 0 (PAD) and `vocab−1` (EOS) are never sampled.
    token_latents: Tensor,
    categories: Vec<CategoryLatent>,
}

fn gaussian(n: usize, std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("std is finite and nonnegative");
    (0..n).map(|_| normal.sample(rng)).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn affinity(row: &[f64], z: &[f64]) -> f64 {
    row.iter().zip(z).map(|(a, b)| a * b).sum()
}

impl World {
    /// Builds the first `categories` category latents. Prefixes are stable:
    /// category `c` is the same for every `categories > c`.
    pub fn new(config: WorldConfig, categories: usize) -> Result<Self> {
        if config.vocab < 3 || config.support == 0 || config.support > config.vocab - 2 {
            return Err(Error::Config(format!(
                "support {} does not fit vocabulary {}",
                config.support, config.vocab
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let l = config.latent;
        let proj_std = 1.0 / (l as f64).sqrt();
        let patch_proj = (0..config.patches)
            .map(|_| Tensor::new(vec![config.input_width, l], gaussian(config.input_width * l, proj_std, &mut rng)))
            .collect::<Result<Vec<_>>>()?;
        let token_latents = Tensor::new(vec![config.vocab, l], gaussian(config.vocab * l, proj_std, &mut rng))?;
        let mut world = Self {
            config,
            patch_proj,
            token_latents,
            categories: Vec::new(),
        };
        let mut cat_rng = ChaCha8Rng::seed_from_u64(world.config.seed ^ 0x5eed_ca7e);
        for id in 0..categories {
            let cat = world.draw_category(id as u32, &mut cat_rng);
            world.categories.push(cat);
        }
        Ok(world)
    }

    fn draw_category(&self, id: u32, rng: &mut ChaCha8Rng) -> CategoryLatent {
        let l = self.config.latent;
        let center = loop {
            let c = gaussian(l, 1.0, rng);
            let far = self
                .categories
                .iter()
                .all(|o| dist(o.video_center.data(), &c) >= self.config.min_center_distance);
            if far {
                break c;
            }
        };
        let drift = gaussian(l, self.config.drift_std, rng);
        let words = self.words_by_affinity(&center);
        let chosen: Vec<u32> = words[..self.config.support].to_vec();
        let logits: Vec<f64> = chosen
            .iter()
            .map(|&w| affinity(self.token_latents.row(w as usize), &center) / self.config.word_temperature)
            .collect();
        let weights = softmax(&logits);
        CategoryLatent {
            id,
            video_center: Tensor::new(vec![l], center).expect("latent is nonempty"),
            drift: Tensor::new(vec![l], drift).expect("latent is nonempty"),
            token_profile: chosen.into_iter().zip(weights).collect(),
        }
    }

    /// Sampleable words sorted by descending affinity, ties by id.
    fn words_by_affinity(&self, z: &[f64]) -> Vec<u32> {
        let mut words: Vec<u32> = (1..self.config.vocab as u32 - 1).collect();
        let score = |w: u32| affinity(self.token_latents.row(w as usize), z);
        words.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
        words
    }

    pub fn category(&self, id: u32) -> Result<&CategoryLatent> {
        self.categories
            .get(id as usize)
            .ok_or_else(|| Error::Usage(format!("category {id} not generated")))
    }

    pub fn category_count(&self) -> usize {
        self.categories.len()
    }

    pub fn eos(&self) -> u32 {
        self.config.vocab as u32 - 1
    }

    pub fn sample_instance<R: Rng + ?Sized>(&self, cat: &CategoryLatent, rng: &mut R) -> Instance {
        let l = self.config.latent;
        let inst = Normal::new(0.0, self.config.instance_std).expect("finite std");
        let drift = Normal::new(0.0, self.config.drift_std).expect("finite std");
        let latent = cat.video_center.data().iter().map(|c| c + inst.sample(rng)).collect();
        let d = cat.drift.data().iter().map(|c| c + drift.sample(rng)).collect();
        Instance {
            latent: Tensor::new(vec![l], latent).expect("latent is nonempty"),
            drift: Tensor::new(vec![l], d).expect("latent is nonempty"),
        }
    }

    /// `[M, latent]` frame latents of an instance.
    pub fn frame_latents<R: Rng + ?Sized>(&self, inst: &Instance, frames: usize, rng: &mut R) -> Tensor {
        let l = self.config.latent;
        let noise = Normal::new(0.0, self.config.frame_std).expect("finite std");
        let mid = (frames as f64 - 1.0) / 2.0;
        let mut out = Vec::with_capacity(frames * l);
        for m in 0..frames {
            let step = m as f64 - mid;
            for j in 0..l {
                out.push(inst.latent.data()[j] + step * inst.drift.data()[j] + noise.sample(rng));
            }
        }
        Tensor::new(vec![frames, l], out).expect("frames >= 1")
    }

    /// Patch features `[M, P, input_width]` from frame latents.
    pub fn render<R: Rng + ?Sized>(&self, latents: &Tensor, rng: &mut R) -> Result<Video> {
        let (frames, l) = latents.as_matrix();
        let (p, d) = (self.config.patches, self.config.input_width);
        let noise = Normal::new(0.0, self.config.patch_std).expect("finite std");
        let mut out = Vec::with_capacity(frames * p * d);
        for m in 0..frames {
            let z = latents.row(m);
            for proj in &self.patch_proj {
                for r in 0..d {
                    let row = &proj.data()[r * l..(r + 1) * l];
                    out.push(affinity(row, z) + noise.sample(rng));
                }
            }
        }
        Video::new(Tensor::new(vec![frames, p, d], out)?)
    }

    pub fn instance_video<R: Rng + ?Sized>(&self, inst: &Instance, frames: usize, rng: &mut R) -> Result<Video> {
        let latents = self.frame_latents(inst, frames, rng);
        self.render(&latents, rng)
    }

    /// `len` support words weighted towards the instance, then EOS.
    pub fn instance_query<R: Rng + ?Sized>(&self, cat: &CategoryLatent, inst: &Instance, len: usize, rng: &mut R) -> Vec<u32> {
        let z: Vec<f64> = inst
            .latent
            .data()
            .iter()
            .zip(inst.drift.data())
            .map(|(a, d)| a + self.config.motion * d)
            .collect();
        let logits: Vec<f64> = cat
            .token_profile
            .iter()
            .map(|&(w, _)| affinity(self.token_latents.row(w as usize), &z) / self.config.word_temperature)
            .collect();
        let weights = softmax(&logits);
        let pick = WeightedIndex::new(&weights).expect("softmax weights are positive");
        let mut ids: Vec<u32> = (0..len).map(|_| cat.token_profile[pick.sample(rng)].0).collect();
        ids.push(self.eos());
        ids
    }

    pub fn sample_video<R: Rng + ?Sized>(&self, cat: &CategoryLatent, frames: usize, rng: &mut R) -> Result<Video> {
        let inst = self.sample_instance(cat, rng);
        self.instance_video(&inst, frames, rng)
    }

    pub fn sample_query<R: Rng + ?Sized>(&self, cat: &CategoryLatent, len: usize, rng: &mut R) -> Vec<u32> {
        let inst = self.sample_instance(cat, rng);
        self.instance_query(cat, &inst, len, rng)
    }

    /// Regenerates the pair drawn from `video_seed`: `(query, video)`.
    pub fn pair_from_seed(&self, category: u32, video_seed: u64, frames: usize, query_len: usize) -> Result<(Vec<u32>, Video)> {
        let cat = self.category(category)?;
        let mut rng = ChaCha8Rng::seed_from_u64(video_seed);
        let inst = self.sample_instance(cat, &mut rng);
        let query = self.instance_query(cat, &inst, query_len, &mut rng);
        let video = self.instance_video(&inst, frames, &mut rng)?;
        Ok((query, video))
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Train,
    Test,
}

/// One manifest record. Videos are regenerated from `video_seed`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    /// 1-based task index; 0 for the pretraining split.
    pub task: usize,
    pub category: u32,
    pub video_id: u64,
    pub query_tokens: Vec<u32>,
    pub video_seed: u64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamConfig {
    pub world: WorldConfig,
    pub seed: u64,
    pub tasks: usize,
    pub cats_per_task: usize,
    pub videos_per_cat: usize,
    /// Videos per category held out as the task's test split.
    pub test_per_cat: usize,
    pub frames: usize,
    pub query_len: usize,
    pub base_categories: usize,
}

impl StreamConfig {
    /// Desk-scale defaults: 5 tasks of 4 categories, 16 videos each, 8 frames.
    pub fn desk(world_seed: u64, seed: u64, bb: &BackboneConfig) -> Self {
        Self {
            world: WorldConfig::for_backbone(world_seed, bb),
            seed,
            tasks: 5,
            cats_per_task: 4,
            videos_per_cat: 16,
            test_per_cat: 4,
            frames: 8,
            query_len: 8,
            base_categories: 48,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tasks", self.tasks),
            ("cats_per_task", self.cats_per_task),
            ("videos_per_cat", self.videos_per_cat),
            ("frames", self.frames),
            ("query_len", self.query_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.test_per_cat == 0 || self.test_per_cat >= self.videos_per_cat {
            return Err(Error::Config(format!(
                "test_per_cat {} must lie in 1..videos_per_cat ({})",
                self.test_per_cat, self.videos_per_cat
            )));
        }
        Ok(())
    }

    pub fn category_universe(&self) -> usize {
        self.base_categories + self.tasks * self.cats_per_task
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub index: usize,
    pub categories: Vec<u32>,
    pub pairs: Vec<Pair>,
}

impl Task {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Pair> {
        self.pairs.iter().filter(move |p| p.split == split)
    }
}

#[derive(Clone, Debug)]
pub struct TaskStream {
    pub config: StreamConfig,
    pub world: World,
    pub tasks: Vec<Task>,
}

fn category_pairs(
    task: usize,
    category: u32,
    count: usize,
    test: usize,
    split_train: Split,
    world: &World,
    cfg: &StreamConfig,
    next_id: &mut u64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Pair>> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let video_seed: u64 = rng.random();
        let (query, _) = world.pair_from_seed(category, video_seed, 1, cfg.query_len)?;
        out.push(Pair {
            task,
            category,
            video_id: *next_id,
            query_tokens: query,
            video_seed,
            split: if i + test >= count { Split::Test } else { split_train },
        });
        *next_id += 1;
    }
    Ok(out)
}

impl TaskStream {
    /// Pure function of the configuration.
    pub fn generate(cfg: &StreamConfig) -> Result<Self> {
        cfg.validate()?;
        let world = World::new(cfg.world.clone(), cfg.category_universe())?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let base = cfg.base_categories as u32;
        let mut pool: Vec<u32> = (base..cfg.category_universe() as u32).collect();
        pool.shuffle(&mut rng);
        let mut next_id = 0u64;
        let mut tasks = Vec::with_capacity(cfg.tasks);
        for (t, chunk) in pool.chunks(cfg.cats_per_task).enumerate() {
            let mut categories = chunk.to_vec();
            categories.sort_unstable();
            let mut pairs = Vec::new();
            for &c in &categories {
                pairs.extend(category_pairs(
                    t + 1,
                    c,
                    cfg.videos_per_cat,
                    cfg.test_per_cat,
                    Split::Train,
                    &world,
                    cfg,
                    &mut next_id,
                    &mut rng,
                )?);
            }
            tasks.push(Task {
                index: t + 1,
                categories,
                pairs,
            });
        }
        Ok(Self {
            config: cfg.clone(),
            world,
            tasks,
        })
    }

    /// Pretraining pairs over the base categories; independent of the stream seed.
    pub fn base_pairs(cfg: &StreamConfig) -> Result<Vec<Pair>> {
        cfg.validate()?;
        if cfg.base_categories == 0 {
            return Err(Error::Usage("no base categories configured".into()));
        }
        let world = World::new(cfg.world.clone(), cfg.base_categories)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.world.seed ^ 0xba5e);
        let mut next_id = 0u64;
        let mut out = Vec::new();
        for c in 0..cfg.base_categories as u32 {
            out.extend(category_pairs(
                0,
                c,
                cfg.videos_per_cat,
                0,
                Split::Base,
                &world,
                cfg,
                &mut next_id,
                &mut rng,
            )?);
        }
        Ok(out)
    }

    /// [`Self::base_pairs`] with each video rendered.
    pub fn base_pairs_with_videos(cfg: &StreamConfig) -> Result<Vec<(Vec<u32>, Video)>> {
        let world = World::new(cfg.world.clone(), cfg.base_categories)?;
        Self::base_pairs(cfg)?
            .iter()
            .map(|p| Ok((p.query_tokens.clone(), video_for(&world, cfg, p)?)))
            .collect()
    }

    pub fn task(&self, t: usize) -> Result<&Task> {
        t.checked_sub(1)
            .and_then(|i| self.tasks.get(i))
            .ok_or_else(|| Error::Usage(format!("task {t} outside 1..={}", self.tasks.len())))
    }

    pub fn video(&self, pair: &Pair) -> Result<Video> {
        video_for(&self.world, &self.config, pair)
    }

    pub fn pairs(&self) -> impl Iterator<Item = &Pair> {
        self.tasks.iter().flat_map(|t| t.pairs.iter())
    }
}

pub fn video_for(world: &World, cfg: &StreamConfig, pair: &Pair) -> Result<Video> {
    Ok(world
        .pair_from_seed(pair.category, pair.video_seed, cfg.frames, cfg.query_len)?
        .1)
}

/// Every category id used by the stream, checked for pairwise disjointness.
pub fn check_disjoint(stream: &TaskStream) -> bool {
    let mut seen = BTreeSet::new();
    stream
        .tasks
        .iter()
        .flat_map(|t| t.categories.iter())
        .all(|c| seen.insert(*c))
}

pub fn write_manifest<'a, W: Write>(out: &mut W, pairs: impl IntoIterator<Item = &'a Pair>) -> Result<()> {
    for p in pairs {
        let line = serde_json::to_string(p).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_manifest<R: BufRead>(input: R) -> Result<Vec<Pair>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: Pair = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("manifest line {}: {e}", n + 1)))?;
        out.push(p);
    }
    Ok(out)
}
