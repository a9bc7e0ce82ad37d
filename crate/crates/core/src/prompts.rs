//! Per-task prompt pools and their attention-residual injection.
//!
//! Each task owns one key/value pool per covered layer and per encoder side.
//! A pool's attention output is computed against the layer's own queries and
//! added residually, never touching the layer's key/value stream, so earlier
//! tasks' parameters are untouched by later training (interference freedom).

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::diff::{concat_cols, ParameterSet, Tensor};
use crate::encoder::AttentionInjection;
use crate::error::{Error, Result};
use crate::rng::standard_normal;
use crate::scalar::Real;

/// Which tower a pool attaches to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum EncoderSide {
    Vision,
    Text,
}

impl EncoderSide {
    pub fn name(self) -> &'static str {
        match self {
            EncoderSide::Vision => "vision",
            EncoderSide::Text => "text",
        }
    }
}

/// Key/value prompt matrices for one (task, side, layer).
pub struct PromptPool<F: Real> {
    pub keys: Tensor<F>,
    pub values: Tensor<F>,
    pub layer: usize,
}

impl<F: Real> PromptPool<F> {
    /// Zero values and small Gaussian keys: a fresh pool is an exact no-op
    /// on the backbone until training moves the values.
    fn init(rng: &mut ChaCha8Rng, len: usize, width: usize, layer: usize) -> Result<Self> {
        let keys: Vec<F> = (0..len * width)
            .map(|_| F::from_f64(standard_normal(rng) * 0.02))
            .collect();
        Ok(PromptPool {
            keys: Tensor::parameter(vec![len, width], keys)?,
            values: Tensor::parameter(vec![len, width], vec![F::zero(); len * width])?,
            layer,
        })
    }
}

/// All prompt state added on top of the frozen backbone, keyed by
/// (task, side, layer). Vision pools cover every vision layer; text pools
/// cover the first `text_layers` layers.
pub struct PromptLibrary<F: Real> {
    pools: BTreeMap<(usize, EncoderSide, usize), PromptPool<F>>,
    prompt_len: usize,
    width: usize,
    vision_layers: usize,
    text_layers: usize,
}

impl<F: Real> PromptLibrary<F> {
    pub fn new(prompt_len: usize, width: usize, vision_depth: usize, text_depth: usize) -> Self {
        PromptLibrary {
            pools: BTreeMap::new(),
            prompt_len,
            width,
            vision_layers: vision_depth,
            text_layers: text_depth.min(8),
        }
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn vision_layers(&self) -> usize {
        self.vision_layers
    }

    pub fn text_layers(&self) -> usize {
        self.text_layers
    }

    /// Number of tasks with pools.
    pub fn task_count(&self) -> usize {
        self.pools
            .keys()
            .map(|(t, _, _)| t + 1)
            .max()
            .unwrap_or(0)
    }

    /// Allocate fresh pools for the next task; ids must arrive in order.
    pub fn add_task(&mut self, task: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        if task != self.task_count() {
            return Err(Error::State(format!(
                "tasks must be added in order: expected {}, got {task}",
                self.task_count()
            )));
        }
        for layer in 0..self.vision_layers {
            self.pools.insert(
                (task, EncoderSide::Vision, layer),
                PromptPool::init(rng, self.prompt_len, self.width, layer)?,
            );
        }
        for layer in 0..self.text_layers {
            self.pools.insert(
                (task, EncoderSide::Text, layer),
                PromptPool::init(rng, self.prompt_len, self.width, layer)?,
            );
        }
        Ok(())
    }

    pub fn pool(&self, task: usize, side: EncoderSide, layer: usize) -> Option<&PromptPool<F>> {
        self.pools.get(&(task, side, layer))
    }

    /// The task's trainable tensors, named by checkpoint convention.
    pub fn task_parameters(&self, task: usize) -> Result<ParameterSet<F>> {
        if task >= self.task_count() {
            return Err(Error::State(format!("task {task} has no pools")));
        }
        let mut ps = ParameterSet::new();
        for ((t, side, layer), pool) in &self.pools {
            if *t != task {
                continue;
            }
            let prefix = format!("prompt/{t}/{}/{layer}", side.name());
            ps.insert(format!("{prefix}/K"), pool.keys.clone())?;
            ps.insert(format!("{prefix}/V"), pool.values.clone())?;
        }
        Ok(ps)
    }

    pub fn freeze_task(&self, task: usize) -> Result<()> {
        self.task_parameters(task)?.set_trainable(false);
        Ok(())
    }

    pub fn task_checksum(&self, task: usize) -> Result<u64> {
        Ok(self.task_parameters(task)?.checksum())
    }

    /// Every pool tensor with its checkpoint name, across all tasks.
    pub fn all_parameters(&self) -> ParameterSet<F> {
        let mut ps = ParameterSet::new();
        for ((t, side, layer), pool) in &self.pools {
            let prefix = format!("prompt/{t}/{}/{layer}", side.name());
            ps.insert(format!("{prefix}/K"), pool.keys.clone())
                .expect("pool names are unique");
            ps.insert(format!("{prefix}/V"), pool.values.clone())
                .expect("pool names are unique");
        }
        ps
    }
}

/// Prompt attention: softmax(Q K_r^T / sqrt(dh)) V_r, evaluated per head
/// with the backbone's head geometry.
pub fn prompt_attention<F: Real>(
    queries: &Tensor<F>,
    pool: &PromptPool<F>,
    heads: usize,
) -> Result<Tensor<F>> {
    let [_, qd] = queries.shape() else {
        return Err(Error::Dimension(format!(
            "prompt_attention: queries must be rank 2, got {:?}",
            queries.shape()
        )));
    };
    let width = pool.keys.shape()[1];
    if *qd != width {
        return Err(Error::Dimension(format!(
            "prompt_attention: query width {qd} vs pool width {width}"
        )));
    }
    if width % heads != 0 {
        return Err(Error::Dimension(format!(
            "prompt_attention: width {width} not divisible by {heads} heads"
        )));
    }
    let dh = width / heads;
    let inv_sqrt = F::from_f64(1.0 / (dh as f64).sqrt());
    let mut parts = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = queries.slice_cols(lo, hi)?;
        let kh = pool.keys.slice_cols(lo, hi)?;
        let vh = pool.values.slice_cols(lo, hi)?;
        let attn = qh.matmul(&kh.transpose()?)?.scale(inv_sqrt).softmax(1)?;
        parts.push(attn.matmul(&vh)?);
    }
    concat_cols(&parts)
}

/// Weighted residual merge: `O_ori + weight * O_r`. Weight 0 returns the
/// original output bit-exactly; weight 1 is the plain residual sum.
pub fn prompt_residual<F: Real>(
    original: &Tensor<F>,
    prompt_out: &Tensor<F>,
    weight: f64,
) -> Result<Tensor<F>> {
    if !(0.0..=1.0).contains(&weight) {
        return Err(Error::Argument(format!(
            "prompt weight {weight} outside [0, 1]"
        )));
    }
    if original.shape() != prompt_out.shape() {
        return Err(Error::Dimension(format!(
            "prompt_residual: {:?} vs {:?}",
            original.shape(),
            prompt_out.shape()
        )));
    }
    if weight == 0.0 {
        return Ok(original.clone());
    }
    if weight == 1.0 {
        return original.add(prompt_out);
    }
    original.add(&prompt_out.scale(F::from_f64(weight)))
}

/// Argmax over per-task confidence scores; ties break to the lowest task id.
pub fn select_pool(scores: &[f64]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::State("select_pool: no tasks seen yet".into()));
    }
    let mut best = 0usize;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Batch-wise text prompting weight: mean of per-instance sigmoid scores.
pub fn text_prompt_weight(batch_scores: &[f64]) -> Result<f64> {
    if batch_scores.is_empty() {
        return Err(Error::Argument("text_prompt_weight: empty batch".into()));
    }
    let total: f64 = batch_scores.iter().map(|&s| sigmoid(s)).sum();
    Ok(total / batch_scores.len() as f64)
}

/// How a planned injection scales the prompt residual for one instance and
/// layer.
#[derive(Clone)]
pub enum Multiplier<F: Real> {
    /// Plain constant in [0, 1]; 1 means the unweighted residual.
    Const(f64),
    /// Graph-connected scalar (gate training path).
    Node(Tensor<F>),
}

/// Precomputed injection schedule: for each instance and layer, which pool
/// applies and how strongly. Entries of `None` leave the layer untouched.
pub struct PlannedInjection<'a, F: Real> {
    heads: usize,
    plan: Vec<Vec<Option<(&'a PromptPool<F>, Multiplier<F>)>>>,
}

impl<'a, F: Real> PlannedInjection<'a, F> {
    pub fn new(heads: usize, plan: Vec<Vec<Option<(&'a PromptPool<F>, Multiplier<F>)>>>) -> Self {
        PlannedInjection { heads, plan }
    }
}

impl<'a, F: Real> AttentionInjection<F> for PlannedInjection<'a, F> {
    fn residual(
        &self,
        instance: usize,
        layer: usize,
        queries: &Tensor<F>,
    ) -> Result<Option<Tensor<F>>> {
        let Some(row) = self.plan.get(instance) else {
            return Err(Error::Index(format!(
                "injection plan has no instance {instance}"
            )));
        };
        let Some(Some((pool, mult))) = row.get(layer) else {
            return Ok(None);
        };
        let o_r = prompt_attention(queries, pool, self.heads)?;
        match mult {
            Multiplier::Const(c) => {
                if *c == 0.0 {
                    Ok(None)
                } else if *c == 1.0 {
                    Ok(Some(o_r))
                } else {
                    Ok(Some(o_r.scale(F::from_f64(*c))))
                }
            }
            Multiplier::Node(t) => Ok(Some(o_r.scale_by(t)?)),
        }
    }
}
