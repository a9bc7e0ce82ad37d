//! Synthetic multi-domain task streams.
//!
//! Every class is a (color, shape) attribute pair: the color contributes a
//! channel signature, the shape contributes a second signature plus a spatial
//! mask over the patch grid. Images are noisy renderings of those signatures;
//! a per-domain affine style transform shifts the whole domain's distribution.
//! Class pairs are assigned disjointly, so the pre-training pool, the task
//! stream and any held-out fixture never share a class, while attribute
//! reuse lets the frozen backbone generalize to unseen pairs.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, ImageBatch, TextBatch, Tokenizer};
use crate::error::{Error, Result};
use crate::rng::{split_stream, standard_normal};
use crate::scalar::Real;

const COLORS: [&str; 12] = [
    "crimson", "amber", "teal", "ivory", "violet", "jade", "copper", "slate",
    "coral", "indigo", "olive", "pearl",
];
const SHAPES: [&str; 12] = [
    "cube", "orb", "wedge", "helix", "prism", "torus", "spiral", "cone",
    "lattice", "shard", "disc", "knot",
];

/// Shared attribute world: signatures and masks every domain draws from.
pub struct AttributeUniverse {
    color_sigs: Vec<Vec<f64>>,
    shape_sigs: Vec<Vec<f64>>,
    shape_masks: Vec<Vec<f64>>,
    patch_dim: usize,
    tokens: usize,
    /// All (color, shape) pairs in a seed-fixed shuffled order; slices of
    /// this list become domain class sets.
    assignment: Vec<(usize, usize)>,
}

impl AttributeUniverse {
    pub fn new(cfg: &EncoderConfig, universe_seed: u64) -> Self {
        let mut rng = split_stream(universe_seed, "universe");
        let half = cfg.patch_dim / 2;
        let color_sigs: Vec<Vec<f64>> = (0..COLORS.len())
            .map(|_| (0..half).map(|_| standard_normal(&mut rng)).collect())
            .collect();
        let shape_sigs: Vec<Vec<f64>> = (0..SHAPES.len())
            .map(|_| {
                (0..cfg.patch_dim - half)
                    .map(|_| standard_normal(&mut rng))
                    .collect()
            })
            .collect();
        let tokens = cfg.image_tokens();
        let shape_masks: Vec<Vec<f64>> = (0..SHAPES.len())
            .map(|_| {
                (0..tokens)
                    .map(|_| if rng.gen::<f64>() < 0.5 { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        let mut assignment: Vec<(usize, usize)> = (0..COLORS.len())
            .flat_map(|c| (0..SHAPES.len()).map(move |s| (c, s)))
            .collect();
        assignment.shuffle(&mut rng);
        AttributeUniverse {
            color_sigs,
            shape_sigs,
            shape_masks,
            patch_dim: cfg.patch_dim,
            tokens,
            assignment,
        }
    }

    pub fn total_combos(&self) -> usize {
        self.assignment.len()
    }

    pub fn class_name(&self, combo: (usize, usize)) -> String {
        format!("{} {}", COLORS[combo.0], SHAPES[combo.1])
    }

    /// The next `count` unassigned combos starting at `offset`.
    fn combos(&self, offset: usize, count: usize) -> Result<Vec<(usize, usize)>> {
        if offset + count > self.assignment.len() {
            return Err(Error::Config(format!(
                "class universe exhausted: need {count} combos at offset {offset}, \
                 only {} exist",
                self.assignment.len()
            )));
        }
        Ok(self.assignment[offset..offset + count].to_vec())
    }

    /// Clean patch rendering (before noise and style) of one class.
    fn render_base(&self, combo: (usize, usize)) -> Vec<f64> {
        let (c, s) = combo;
        let mut out = vec![0.0; self.tokens * self.patch_dim];
        let half = self.color_sigs[c].len();
        for p in 0..self.tokens {
            let amp = 0.5 + self.shape_masks[s][p];
            for (j, &v) in self.color_sigs[c].iter().enumerate() {
                out[p * self.patch_dim + j] = amp * v;
            }
            for (j, &v) in self.shape_sigs[s].iter().enumerate() {
                out[p * self.patch_dim + half + j] = amp * v;
            }
        }
        out
    }
}

/// One synthetic domain: class set, generator parameters and split sizes.
#[derive(Clone, Debug)]
pub struct DomainSpec {
    pub domain_id: usize,
    pub name: String,
    pub class_names: Vec<String>,
    pub combos: Vec<(usize, usize)>,
    /// Within-class noise scale.
    pub noise: f64,
    /// Scale of the random part of the style map A = I + strength * R.
    pub style_strength: f64,
    /// Scale of the style offset b.
    pub style_bias: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub few_shot: Option<usize>,
    /// Seed of this domain's generator streams.
    pub seed: u64,
}

/// Materialized splits of one domain.
pub struct DomainData<F: Real> {
    pub spec: DomainSpec,
    pub train: ImageBatch<F>,
    pub test: ImageBatch<F>,
    pub text: TextBatch,
}

/// Per-patch affine style map.
struct StyleMap {
    matrix: Vec<f64>, // patch_dim x patch_dim
    bias: Vec<f64>,
}

impl StyleMap {
    fn sample(rng: &mut ChaCha8Rng, d: usize, strength: f64, bias: f64) -> Self {
        let mut matrix = vec![0.0; d * d];
        let scale = strength / (d as f64).sqrt();
        for i in 0..d {
            for j in 0..d {
                matrix[i * d + j] = standard_normal(rng) * scale + if i == j { 1.0 } else { 0.0 };
            }
        }
        let bias = (0..d).map(|_| standard_normal(rng) * bias).collect();
        StyleMap { matrix, bias }
    }

    fn apply(&self, patch: &mut [f64], scratch: &mut [f64]) {
        let d = self.bias.len();
        scratch.copy_from_slice(patch);
        for i in 0..d {
            let mut acc = self.bias[i];
            for j in 0..d {
                acc += self.matrix[i * d + j] * scratch[j];
            }
            patch[i] = acc;
        }
    }
}

/// Deterministically generate one domain's train/test splits and class
/// sentences. The same spec and seed always produce identical bytes.
pub fn generate_domain<F: Real>(
    spec: &DomainSpec,
    universe: &AttributeUniverse,
    tokenizer: &Tokenizer,
) -> Result<DomainData<F>> {
    if spec.combos.len() != spec.class_names.len() || spec.combos.is_empty() {
        return Err(Error::Config(format!(
            "domain {}: {} archetypes for {} classes",
            spec.name,
            spec.combos.len(),
            spec.class_names.len()
        )));
    }
    let mut style_rng = split_stream(spec.seed, "style");
    let style = StyleMap::sample(
        &mut style_rng,
        universe.patch_dim,
        spec.style_strength,
        spec.style_bias,
    );
    let train_n = match spec.few_shot {
        Some(cap) => cap.min(spec.train_per_class),
        None => spec.train_per_class,
    };
    if train_n == 0 || spec.test_per_class == 0 {
        return Err(Error::Config(format!(
            "domain {}: empty split (train {train_n}, test {})",
            spec.name, spec.test_per_class
        )));
    }
    let bases: Vec<Vec<f64>> = spec.combos.iter().map(|&c| universe.render_base(c)).collect();

    let make_split = |label: &str, per_class: usize| -> ImageBatch<F> {
        let mut rng = split_stream(spec.seed, label);
        let n = per_class * spec.combos.len();
        let per = universe.tokens * universe.patch_dim;
        let mut pixels = Vec::with_capacity(n * per);
        let mut labels = Vec::with_capacity(n);
        let mut scratch = vec![0.0; universe.patch_dim];
        for (class_id, base) in bases.iter().enumerate() {
            for _ in 0..per_class {
                let mut img = base.clone();
                for v in img.iter_mut() {
                    *v += standard_normal(&mut rng) * spec.noise;
                }
                for p in 0..universe.tokens {
                    let patch = &mut img[p * universe.patch_dim..(p + 1) * universe.patch_dim];
                    style.apply(patch, &mut scratch);
                }
                pixels.extend(img.iter().map(|&v| F::from_f64(v)));
                labels.push(class_id);
            }
        }
        ImageBatch::new(pixels, n, universe.tokens, universe.patch_dim, labels)
            .expect("split construction is shape-consistent")
    };

    let train = make_split("train", train_n);
    let test = make_split("test", spec.test_per_class);
    let text = TextBatch::from_class_names(&spec.class_names, tokenizer);
    Ok(DomainData {
        spec: spec.clone(),
        train,
        test,
        text,
    })
}

/// Task ordering of the stream; the second order is the reversed permutation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskOrder {
    #[serde(rename = "order-1")]
    One,
    #[serde(rename = "order-2")]
    Two,
}

impl std::fmt::Display for TaskOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TaskOrder::One => write!(f, "order-1"),
            TaskOrder::Two => write!(f, "order-2"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub domains: usize,
    pub classes_per_domain: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub order: TaskOrder,
    /// Cap on train samples per class; `None` disables the cap.
    pub few_shot: Option<usize>,
    pub noise: f64,
    pub style_strength: f64,
    pub style_bias: f64,
    /// Seed of the attribute world and domain generators; independent of the
    /// run seed so different training seeds see identical data.
    pub universe_seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            domains: 4,
            classes_per_domain: 8,
            train_per_class: 64,
            test_per_class: 32,
            order: TaskOrder::One,
            few_shot: None,
            noise: 0.35,
            style_strength: 0.6,
            style_bias: 0.8,
            universe_seed: 7,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.domains == 0 || self.classes_per_domain == 0 {
            return Err(Error::Config("stream needs at least one domain and class".into()));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config("stream split sizes must be positive".into()));
        }
        if self.few_shot == Some(0) {
            return Err(Error::Config("few_shot cap must be at least 1".into()));
        }
        if self.noise < 0.0 {
            return Err(Error::Config("stream.noise must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub domains: usize,
    pub classes_per_domain: usize,
    pub train_per_class: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Backbone seed, separate from the run seed so every run of a study
    /// shares one backbone.
    pub seed: u64,
    pub noise: f64,
    pub style_strength: f64,
    pub style_bias: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            domains: 6,
            classes_per_domain: 8,
            train_per_class: 48,
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.5,
            seed: 1,
            noise: 0.35,
            style_strength: 0.15,
            style_bias: 0.15,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.domains == 0 || self.classes_per_domain == 0 || self.train_per_class == 0 {
            return Err(Error::Config("pretrain pool must be non-empty".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("pretrain epochs and batch size must be positive".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("pretrain.learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

/// Ordered task stream plus the pre-training pool it is disjoint from.
pub struct TaskStream {
    pub specs: Vec<DomainSpec>,
    pub order: TaskOrder,
}

/// Build the pre-training pool specs (combos 0..P) and the stream specs
/// (combos after the pool), applying the order permutation to the stream.
pub fn build_world(
    stream_cfg: &StreamConfig,
    pretrain_cfg: &PretrainConfig,
    universe: &AttributeUniverse,
) -> Result<(Vec<DomainSpec>, TaskStream)> {
    stream_cfg.validate()?;
    pretrain_cfg.validate()?;
    let mut offset = 0usize;
    let mut pool = Vec::with_capacity(pretrain_cfg.domains);
    for d in 0..pretrain_cfg.domains {
        let combos = universe.combos(offset, pretrain_cfg.classes_per_domain)?;
        offset += combos.len();
        pool.push(DomainSpec {
            domain_id: d,
            name: format!("pre{d:02}"),
            class_names: combos.iter().map(|&c| universe.class_name(c)).collect(),
            combos,
            noise: pretrain_cfg.noise,
            style_strength: pretrain_cfg.style_strength,
            style_bias: pretrain_cfg.style_bias,
            train_per_class: pretrain_cfg.train_per_class,
            test_per_class: 1,
            few_shot: None,
            seed: splitmix_label(stream_cfg.universe_seed, &format!("pretrain-domain/{d}")),
        });
    }
    let mut specs = Vec::with_capacity(stream_cfg.domains);
    for d in 0..stream_cfg.domains {
        let combos = universe.combos(offset, stream_cfg.classes_per_domain)?;
        offset += combos.len();
        specs.push(DomainSpec {
            domain_id: d,
            name: format!("dom{d:02}"),
            class_names: combos.iter().map(|&c| universe.class_name(c)).collect(),
            combos,
            noise: stream_cfg.noise,
            style_strength: stream_cfg.style_strength,
            style_bias: stream_cfg.style_bias,
            train_per_class: stream_cfg.train_per_class,
            test_per_class: stream_cfg.test_per_class,
            few_shot: stream_cfg.few_shot,
            seed: splitmix_label(stream_cfg.universe_seed, &format!("stream-domain/{d}")),
        });
    }
    if stream_cfg.order == TaskOrder::Two {
        specs.reverse();
        for (i, s) in specs.iter_mut().enumerate() {
            s.domain_id = i;
        }
    }
    Ok((
        pool,
        TaskStream {
            specs,
            order: stream_cfg.order,
        },
    ))
}

fn splitmix_label(seed: u64, label: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64 ^ seed;
    for &b in label.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
