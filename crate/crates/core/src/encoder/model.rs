//! The dual-encoder model and its batch types.

use rand_chacha::ChaCha8Rng;

use crate::diff::{concat_rows, embedding_lookup, neg_log_softmax_diag, ParameterSet, Tensor};
use crate::error::{Error, Result};
use crate::rng::standard_normal;
use crate::scalar::Real;

use super::attention::{AttentionInjection, LayerNormParams, Linear, NoInjection, Tower};
use super::{EncoderConfig, Tokenizer};

/// Pre-patchified image batch: `[B, tokens, patch_dim]` pixel features plus
/// integer class labels.
#[derive(Clone)]
pub struct ImageBatch<F: Real> {
    pixels: Vec<F>,
    batch: usize,
    tokens: usize,
    patch_dim: usize,
    pub labels: Vec<usize>,
}

impl<F: Real> ImageBatch<F> {
    pub fn new(
        pixels: Vec<F>,
        batch: usize,
        tokens: usize,
        patch_dim: usize,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if batch == 0 {
            return Err(Error::Argument("image batch must hold at least one instance".into()));
        }
        if pixels.len() != batch * tokens * patch_dim {
            return Err(Error::Dimension(format!(
                "pixel count {} does not match {batch}x{tokens}x{patch_dim}",
                pixels.len()
            )));
        }
        if labels.len() != batch {
            return Err(Error::Dimension(format!(
                "{} labels for {batch} instances",
                labels.len()
            )));
        }
        Ok(ImageBatch { pixels, batch, tokens, patch_dim, labels })
    }

    pub fn len(&self) -> usize {
        self.batch
    }

    pub fn is_empty(&self) -> bool {
        self.batch == 0
    }

    /// Patch matrix of one instance as a constant `[tokens, patch_dim]` leaf.
    pub fn instance(&self, b: usize) -> Tensor<F> {
        let n = self.tokens * self.patch_dim;
        Tensor::from_vec(
            vec![self.tokens, self.patch_dim],
            self.pixels[b * n..(b + 1) * n].to_vec(),
        )
        .expect("instance slice is shape-consistent")
    }

    /// A new batch containing the selected instances, in the given order.
    pub fn select(&self, order: &[usize]) -> Result<ImageBatch<F>> {
        let n = self.tokens * self.patch_dim;
        let mut pixels = Vec::with_capacity(order.len() * n);
        let mut labels = Vec::with_capacity(order.len());
        for &b in order {
            if b >= self.batch {
                return Err(Error::Index(format!("instance {b} out of {}", self.batch)));
            }
            pixels.extend_from_slice(&self.pixels[b * n..(b + 1) * n]);
            labels.push(self.labels[b]);
        }
        ImageBatch::new(pixels, order.len(), self.tokens, self.patch_dim, labels)
    }
}

/// Tokenized class sentences, one row per class.
#[derive(Clone, Debug)]
pub struct TextBatch {
    pub rows: Vec<Vec<usize>>,
}

impl TextBatch {
    pub fn from_class_names(names: &[String], tokenizer: &Tokenizer) -> Self {
        TextBatch {
            rows: names.iter().map(|n| tokenizer.encode(n)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// `[N, d]` embeddings with unit-norm rows.
pub struct EmbeddingBatch<F: Real> {
    pub rows: Tensor<F>,
}

impl<F: Real> EmbeddingBatch<F> {
    pub fn new(rows: Tensor<F>) -> Result<Self> {
        let [n, d] = rows.shape() else {
            return Err(Error::Dimension(format!(
                "embedding batch must be rank 2, got {:?}",
                rows.shape()
            )));
        };
        let (n, d) = (*n, *d);
        let v = rows.values();
        for i in 0..n {
            let norm: F = (0..d).map(|j| v[i * d + j] * v[i * d + j]).sum::<F>().sqrt();
            if (norm.to_f64() - 1.0).abs() > 1e-6 {
                return Err(Error::Numeric(format!(
                    "embedding row {i} has norm {}, expected 1",
                    norm.to_f64()
                )));
            }
        }
        drop(v);
        Ok(EmbeddingBatch { rows })
    }

    pub fn count(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.rows.shape()[1]
    }
}

/// Image tower + text tower with a shared embedding width.
pub struct DualEncoder<F: Real> {
    cfg: EncoderConfig,
    tokenizer: Tokenizer,
    patch_embed: Linear<F>,
    vision_pos: Tensor<F>,
    vision: Tower<F>,
    vision_ln: LayerNormParams<F>,
    token_table: Tensor<F>,
    text_pos: Tensor<F>,
    text: Tower<F>,
    text_ln: LayerNormParams<F>,
    params: ParameterSet<F>,
}

impl<F: Real> DualEncoder<F> {
    pub fn new(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParameterSet::new();
        let width = cfg.width;
        let patch_embed = Linear::new(rng, &mut params, "backbone/vision/patch", cfg.patch_dim, width)?;
        let vision_pos = Tensor::parameter(
            vec![cfg.image_tokens(), width],
            gaussian_values(rng, cfg.image_tokens() * width, 0.02),
        )?;
        params.insert("backbone/vision/pos", vision_pos.clone())?;
        let vision = Tower::new(
            rng,
            &mut params,
            "backbone/vision",
            cfg.vision_depth,
            width,
            cfg.mlp_hidden(),
            cfg.heads,
        )?;
        let vision_ln = LayerNormParams::new(&mut params, "backbone/vision/embed_ln", width)?;

        let token_table = Tensor::parameter(
            vec![cfg.vocab_size, width],
            gaussian_values(rng, cfg.vocab_size * width, 0.02),
        )?;
        params.insert("backbone/text/tokens", token_table.clone())?;
        let text_pos = Tensor::parameter(
            vec![cfg.max_text_len, width],
            gaussian_values(rng, cfg.max_text_len * width, 0.02),
        )?;
        params.insert("backbone/text/pos", text_pos.clone())?;
        let text = Tower::new(
            rng,
            &mut params,
            "backbone/text",
            cfg.text_depth,
            width,
            cfg.mlp_hidden(),
            cfg.heads,
        )?;
        let text_ln = LayerNormParams::new(&mut params, "backbone/text/embed_ln", width)?;

        Ok(DualEncoder {
            cfg: cfg.clone(),
            tokenizer: Tokenizer::new(cfg.vocab_size, cfg.max_text_len),
            patch_embed,
            vision_pos,
            vision,
            vision_ln,
            token_table,
            text_pos,
            text,
            text_ln,
            params,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    /// All backbone parameters, in construction order.
    pub fn parameters(&self) -> &ParameterSet<F> {
        &self.params
    }

    pub fn freeze(&self) {
        self.params.set_trainable(false);
    }

    pub fn backbone_checksum(&self) -> u64 {
        self.params.checksum()
    }

    /// Pooled pre-normalization feature and unit-norm embedding row for one
    /// image instance. The pooled vector is what gates and the router see.
    fn vision_instance(
        &self,
        batch: &ImageBatch<F>,
        b: usize,
        inj: &dyn AttentionInjection<F>,
    ) -> Result<(Tensor<F>, Tensor<F>)> {
        let x = batch.instance(b);
        let embedded = self.patch_embed.apply(&x)?.add(&self.vision_pos)?;
        let tokens = self.vision.forward(embedded, b, inj)?;
        let pooled = tokens.mean_rows()?; // [d]
        let row = pooled.reshape(vec![1, self.cfg.width])?;
        let emb = self.vision_ln.apply(&row)?.l2_normalize(1)?;
        Ok((pooled, emb))
    }

    /// Encode an image batch under the given per-layer injection hook.
    pub fn encode_image(
        &self,
        batch: &ImageBatch<F>,
        inj: &dyn AttentionInjection<F>,
    ) -> Result<EmbeddingBatch<F>> {
        let mut rows = Vec::with_capacity(batch.len());
        for b in 0..batch.len() {
            let (_, emb) = self.vision_instance(batch, b, inj)?;
            rows.push(emb);
        }
        EmbeddingBatch::new(concat_rows(&rows)?)
    }

    /// Frozen-backbone pooled features, one plain vector per instance.
    /// No injection, no gradient; this is the stable feature space the gates
    /// and the distribution router operate in.
    pub fn frozen_features(&self, batch: &ImageBatch<F>) -> Result<Vec<Vec<F>>> {
        let mut out = Vec::with_capacity(batch.len());
        for b in 0..batch.len() {
            let (pooled, _) = self.vision_instance(batch, b, &NoInjection)?;
            out.push(pooled.to_vec());
        }
        Ok(out)
    }

    /// Encode class sentences under the given injection hook.
    pub fn encode_text(
        &self,
        batch: &TextBatch,
        inj: &dyn AttentionInjection<F>,
    ) -> Result<EmbeddingBatch<F>> {
        if batch.is_empty() {
            return Err(Error::Argument("empty text batch".into()));
        }
        let mut rows = Vec::with_capacity(batch.len());
        for (m, ids) in batch.rows.iter().enumerate() {
            if ids.len() != self.cfg.max_text_len {
                return Err(Error::Dimension(format!(
                    "text row {m} has {} tokens, expected {}",
                    ids.len(),
                    self.cfg.max_text_len
                )));
            }
            let embedded = embedding_lookup(&self.token_table, ids)?.add(&self.text_pos)?;
            let tokens = self.text.forward(embedded, m, inj)?;
            let pooled = tokens.mean_rows()?.reshape(vec![1, self.cfg.width])?;
            rows.push(self.text_ln.apply(&pooled)?.l2_normalize(1)?);
        }
        EmbeddingBatch::new(concat_rows(&rows)?)
    }

    pub fn vision_depth(&self) -> usize {
        self.vision.depth()
    }

    pub fn text_depth(&self) -> usize {
        self.text.depth()
    }
}

fn gaussian_values<F: Real>(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<F> {
    (0..n).map(|_| F::from_f64(standard_normal(rng) * std)).collect()
}

/// Symmetric InfoNCE is not required here: the objective matches image i
/// against all texts in the batch, with row i of `txt` as its positive.
pub fn contrastive_loss<F: Real>(
    img: &EmbeddingBatch<F>,
    txt: &EmbeddingBatch<F>,
    temperature: F,
) -> Result<Tensor<F>> {
    if img.count() != txt.count() {
        return Err(Error::Dimension(format!(
            "contrastive_loss: {} images vs {} texts",
            img.count(),
            txt.count()
        )));
    }
    let sims = img.rows.matmul(&txt.rows.transpose()?)?;
    let scaled = sims.scale(F::one() / temperature);
    neg_log_softmax_diag(&scaled)
}

/// Argmax of cosine similarity per image; ties break to the lowest class id.
/// Rescaling any embedding by a positive factor cannot change the result.
pub fn classify<F: Real>(img: &EmbeddingBatch<F>, class_txt: &EmbeddingBatch<F>) -> Vec<usize> {
    let n = img.count();
    let m = class_txt.count();
    let d = img.dim();
    let iv = img.rows.values();
    let tv = class_txt.rows.values();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let irow = &iv[i * d..(i + 1) * d];
        let inorm = irow.iter().map(|&x| x * x).sum::<F>().sqrt();
        let mut best = 0usize;
        let mut best_score = F::neg_infinity();
        for c in 0..m {
            let trow = &tv[c * d..(c + 1) * d];
            let tnorm = trow.iter().map(|&x| x * x).sum::<F>().sqrt();
            let dot: F = irow.iter().zip(trow).map(|(&a, &b)| a * b).sum();
            let denom = inorm * tnorm;
            let score = if denom > F::zero() { dot / denom } else { F::zero() };
            if score > best_score {
                best_score = score;
                best = c;
            }
        }
        out.push(best);
    }
    out
}
