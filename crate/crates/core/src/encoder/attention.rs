//! Pre-norm transformer blocks with a residual injection point inside
//! attention. The injection hook sees the layer's query matrix and may return
//! an extra residual for the pre-projection attention output; the backbone
//! never inspects what the hook does, which keeps the frozen path and the
//! prompted path structurally identical.

use crate::diff::{concat_cols, ParameterSet, Tensor};
use crate::error::Result;
use crate::scalar::Real;
use rand_chacha::ChaCha8Rng;

use crate::rng::standard_normal;

/// Per-layer hook consulted once per instance inside each attention layer.
pub trait AttentionInjection<F: Real> {
    /// Residual to add to the pre-projection attention output, already
    /// weighted; `None` leaves the layer untouched (bit-exact frozen path).
    fn residual(
        &self,
        instance: usize,
        layer: usize,
        queries: &Tensor<F>,
    ) -> Result<Option<Tensor<F>>>;
}

/// The all-no-op hook: plain frozen backbone behavior.
pub struct NoInjection;

impl<F: Real> AttentionInjection<F> for NoInjection {
    fn residual(&self, _: usize, _: usize, _: &Tensor<F>) -> Result<Option<Tensor<F>>> {
        Ok(None)
    }
}

fn init_matrix<F: Real>(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    std: f64,
) -> Vec<F> {
    (0..rows * cols)
        .map(|_| F::from_f64(standard_normal(rng) * std))
        .collect()
}

pub(super) struct Linear<F: Real> {
    pub w: Tensor<F>,
    pub b: Tensor<F>,
}

impl<F: Real> Linear<F> {
    pub(super) fn new(
        rng: &mut ChaCha8Rng,
        params: &mut ParameterSet<F>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self> {
        let std = 1.0 / (fan_in as f64).sqrt();
        let w = Tensor::parameter(vec![fan_in, fan_out], init_matrix(rng, fan_in, fan_out, std))?;
        let b = Tensor::parameter(vec![fan_out], vec![F::zero(); fan_out])?;
        params.insert(format!("{name}/w"), w.clone())?;
        params.insert(format!("{name}/b"), b.clone())?;
        Ok(Linear { w, b })
    }

    pub(super) fn apply(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        x.matmul(&self.w)?.add_row(&self.b)
    }
}

pub(super) struct LayerNormParams<F: Real> {
    pub gain: Tensor<F>,
    pub bias: Tensor<F>,
}

impl<F: Real> LayerNormParams<F> {
    pub(super) fn new(params: &mut ParameterSet<F>, name: &str, width: usize) -> Result<Self> {
        let gain = Tensor::parameter(vec![width], vec![F::one(); width])?;
        let bias = Tensor::parameter(vec![width], vec![F::zero(); width])?;
        params.insert(format!("{name}/g"), gain.clone())?;
        params.insert(format!("{name}/b"), bias.clone())?;
        Ok(LayerNormParams { gain, bias })
    }

    pub fn apply(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        x.layernorm(&self.gain, &self.bias)
    }
}

struct MultiHeadAttention<F: Real> {
    wq: Linear<F>,
    wk: Linear<F>,
    wv: Linear<F>,
    wo: Linear<F>,
    heads: usize,
}

impl<F: Real> MultiHeadAttention<F> {
    fn new(
        rng: &mut ChaCha8Rng,
        params: &mut ParameterSet<F>,
        name: &str,
        width: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(MultiHeadAttention {
            wq: Linear::new(rng, params, &format!("{name}/wq"), width, width)?,
            wk: Linear::new(rng, params, &format!("{name}/wk"), width, width)?,
            wv: Linear::new(rng, params, &format!("{name}/wv"), width, width)?,
            wo: Linear::new(rng, params, &format!("{name}/wo"), width, width)?,
            heads,
        })
    }

    fn forward(
        &self,
        x: &Tensor<F>,
        layer: usize,
        instance: usize,
        inj: &dyn AttentionInjection<F>,
    ) -> Result<Tensor<F>> {
        let width = x.shape()[1];
        let dh = width / self.heads;
        let inv_sqrt = F::from_f64(1.0 / (dh as f64).sqrt());
        let q = self.wq.apply(x)?;
        let k = self.wk.apply(x)?;
        let v = self.wv.apply(x)?;
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = q.slice_cols(lo, hi)?;
            let kh = k.slice_cols(lo, hi)?;
            let vh = v.slice_cols(lo, hi)?;
            let scores = qh.matmul(&kh.transpose()?)?.scale(inv_sqrt);
            let attn = scores.softmax(1)?;
            head_outs.push(attn.matmul(&vh)?);
        }
        let mut merged = concat_cols(&head_outs)?;
        if let Some(extra) = inj.residual(instance, layer, &q)? {
            merged = merged.add(&extra)?;
        }
        self.wo.apply(&merged)
    }
}

struct Block<F: Real> {
    ln1: LayerNormParams<F>,
    attn: MultiHeadAttention<F>,
    ln2: LayerNormParams<F>,
    mlp_in: Linear<F>,
    mlp_out: Linear<F>,
}

impl<F: Real> Block<F> {
    fn new(
        rng: &mut ChaCha8Rng,
        params: &mut ParameterSet<F>,
        name: &str,
        width: usize,
        hidden: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Block {
            ln1: LayerNormParams::new(params, &format!("{name}/ln1"), width)?,
            attn: MultiHeadAttention::new(rng, params, &format!("{name}/attn"), width, heads)?,
            ln2: LayerNormParams::new(params, &format!("{name}/ln2"), width)?,
            mlp_in: Linear::new(rng, params, &format!("{name}/mlp_in"), width, hidden)?,
            mlp_out: Linear::new(rng, params, &format!("{name}/mlp_out"), hidden, width)?,
        })
    }

    fn forward(
        &self,
        x: &Tensor<F>,
        layer: usize,
        instance: usize,
        inj: &dyn AttentionInjection<F>,
    ) -> Result<Tensor<F>> {
        let attended = self.attn.forward(&self.ln1.apply(x)?, layer, instance, inj)?;
        let x = x.add(&attended)?;
        let hidden = self.mlp_in.apply(&self.ln2.apply(&x)?)?.gelu();
        let mlp = self.mlp_out.apply(&hidden)?;
        x.add(&mlp)
    }
}

/// Stack of pre-norm blocks.
pub(super) struct Tower<F: Real> {
    blocks: Vec<Block<F>>,
}

impl<F: Real> Tower<F> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        params: &mut ParameterSet<F>,
        name: &str,
        depth: usize,
        width: usize,
        hidden: usize,
        heads: usize,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(depth);
        for i in 0..depth {
            blocks.push(Block::new(
                rng,
                params,
                &format!("{name}/layer{i}"),
                width,
                hidden,
                heads,
            )?);
        }
        Ok(Tower { blocks })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Run all blocks and return the final token matrix (pre final-norm).
    pub fn forward(
        &self,
        mut x: Tensor<F>,
        instance: usize,
        inj: &dyn AttentionInjection<F>,
    ) -> Result<Tensor<F>> {
        for (layer, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x, layer, instance, inj)?;
        }
        Ok(x)
    }
}
