//! Backbone pre-training and per-session prompt/gate training.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diff::{concat_rows, Tensor};
use crate::encoder::{contrastive_loss, DualEncoder, EmbeddingBatch, EncoderConfig, NoInjection, TextBatch};
use crate::error::{Error, Result};
use crate::rng::split_stream;
use crate::routing::{fit_class_stats, fit_task_stats};
use crate::scalar::Real;

use super::domain::{generate_domain, AttributeUniverse, DomainData, DomainSpec, PretrainConfig};
use super::state::PromptedModel;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 5.0,
            epochs: 10,
            batch_size: 32,
            eval_batch_size: 64,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("optimizer.learning_rate must be > 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config(
                "optimizer epochs and batch sizes must be positive".into(),
            ));
        }
        Ok(())
    }
}

pub struct SessionTelemetry {
    pub epoch_losses: Vec<f64>,
}

/// Ground-truth text rows for a labeled image batch: row i of the result is
/// the embedding of image i's class sentence.
fn pick_rows<F: Real>(
    text_emb: &EmbeddingBatch<F>,
    labels: &[usize],
) -> Result<EmbeddingBatch<F>> {
    let mut rows = Vec::with_capacity(labels.len());
    for &label in labels {
        if label >= text_emb.count() {
            return Err(Error::Index(format!(
                "label {label} outside {} text rows",
                text_emb.count()
            )));
        }
        rows.push(text_emb.rows.slice_rows(label, label + 1)?);
    }
    EmbeddingBatch::new(concat_rows(&rows)?)
}

/// Contrastively pre-train a fresh backbone on the held-out domain pool.
/// Returns the trained encoder (not yet frozen) and per-epoch mean losses.
pub fn pretrain_backbone<F: Real>(
    encoder_cfg: &EncoderConfig,
    pretrain_cfg: &PretrainConfig,
    pool: &[DomainSpec],
    universe: &AttributeUniverse,
) -> Result<(DualEncoder<F>, Vec<f64>)> {
    pretrain_cfg.validate()?;
    let mut init_rng = split_stream(pretrain_cfg.seed, "backbone/init");
    let encoder = DualEncoder::<F>::new(encoder_cfg, &mut init_rng)?;

    // one global class registry over the whole pool
    let mut all_names: Vec<String> = Vec::new();
    let mut images: Vec<crate::encoder::ImageBatch<F>> = Vec::new();
    let mut global_labels: Vec<Vec<usize>> = Vec::new();
    for spec in pool {
        let offset = all_names.len();
        let data = generate_domain::<F>(spec, universe, encoder.tokenizer())?;
        all_names.extend(spec.class_names.iter().cloned());
        global_labels.push(data.train.labels.iter().map(|&l| l + offset).collect());
        images.push(data.train);
    }
    let text = TextBatch::from_class_names(&all_names, encoder.tokenizer());

    // flat index over (domain, instance)
    let mut index: Vec<(usize, usize)> = Vec::new();
    for (d, batch) in images.iter().enumerate() {
        for i in 0..batch.len() {
            index.push((d, i));
        }
    }

    let temperature = F::from_f64(encoder_cfg.contrastive_temperature);
    let params = encoder.parameters();
    let lr = F::from_f64(pretrain_cfg.learning_rate);
    let mut shuffle_rng = split_stream(pretrain_cfg.seed, "backbone/shuffle");
    let mut epoch_losses = Vec::with_capacity(pretrain_cfg.epochs);
    for _epoch in 0..pretrain_cfg.epochs {
        index.shuffle(&mut shuffle_rng);
        let mut loss_acc = 0.0;
        let mut steps = 0usize;
        for chunk in index.chunks(pretrain_cfg.batch_size) {
            // encode only the classes present in this step
            let mut local_of_global: std::collections::BTreeMap<usize, usize> =
                std::collections::BTreeMap::new();
            for &(d, i) in chunk {
                let g = global_labels[d][i];
                let next = local_of_global.len();
                local_of_global.entry(g).or_insert(next);
            }
            let locals: Vec<usize> = {
                let mut v = vec![0; local_of_global.len()];
                for (&g, &l) in &local_of_global {
                    v[l] = g;
                }
                v
            };
            let step_text = TextBatch {
                rows: locals.iter().map(|&g| text.rows[g].clone()).collect(),
            };
            let txt_emb = encoder.encode_text(&step_text, &NoInjection)?;

            // assemble the image sub-batch across domains
            let mut labels = Vec::with_capacity(chunk.len());
            let mut emb_rows = Vec::with_capacity(chunk.len());
            for &(d, i) in chunk {
                labels.push(local_of_global[&global_labels[d][i]]);
                let single = images[d].select(&[i])?;
                let emb = encoder.encode_image(&single, &NoInjection)?;
                emb_rows.push(emb.rows);
            }
            let img_emb = EmbeddingBatch::new(concat_rows(&emb_rows)?)?;
            let picked = pick_rows(&txt_emb, &labels)?;
            let loss = contrastive_loss(&img_emb, &picked, temperature)?;
            loss.backward()?;
            params.sgd_step(lr)?;
            loss_acc += loss.item().to_f64();
            steps += 1;
        }
        epoch_losses.push(loss_acc / steps.max(1) as f64);
    }
    Ok((encoder, epoch_losses))
}

/// One incremental session: train the task's pools and gates on its train
/// split, then fit the task- and class-level feature Gaussians.
pub fn train_session<F: Real>(
    model: &mut PromptedModel<F>,
    data: &DomainData<F>,
    task: usize,
    optim: &OptimConfig,
    master_seed: u64,
) -> Result<SessionTelemetry> {
    optim.validate()?;
    if task != model.seen_tasks() {
        return Err(Error::State(format!(
            "sessions are sequential: expected task {}, got {task}",
            model.seen_tasks()
        )));
    }
    let mut init_rng = split_stream(master_seed, &format!("task{task}/init"));
    let mut noise_rng = split_stream(master_seed, &format!("task{task}/gumbel"));
    let mut shuffle_rng = split_stream(master_seed, &format!("task{task}/shuffle"));
    model.begin_task(task, &mut init_rng)?;

    // frozen features of the whole train split, computed once
    let frozen = model.encoder.frozen_features(&data.train)?;
    let width = model.encoder.config().width;
    let feature_tensors: Vec<Tensor<F>> = frozen
        .iter()
        .map(|f| Tensor::from_vec(vec![width], f.clone()).expect("feature shape"))
        .collect();

    let session_params = model.session_parameters(task)?;
    let temperature = F::from_f64(model.encoder.config().contrastive_temperature);
    let lr = F::from_f64(optim.learning_rate);

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(optim.epochs);
    for _epoch in 0..optim.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_acc = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(optim.batch_size) {
            let sub = data.train.select(chunk)?;
            let feats: Vec<Tensor<F>> =
                chunk.iter().map(|&i| feature_tensors[i].clone()).collect();
            let plan = model.training_plan(task, &feats, &mut noise_rng)?;
            let img_emb = model.encoder.encode_image(&sub, &plan)?;

            let text_plan = model.text_plan(task, 1.0, data.text.len())?;
            let txt_emb = model.encoder.encode_text(&data.text, &text_plan)?;
            let picked = pick_rows(&txt_emb, &sub.labels)?;

            let loss = contrastive_loss(&img_emb, &picked, temperature)?;
            loss.backward()?;
            session_params.sgd_step(lr)?;
            loss_acc += loss.item().to_f64();
            steps += 1;
        }
        epoch_losses.push(loss_acc / steps.max(1) as f64);
    }
    model.freeze_task(task)?;

    // routing statistics from the frozen features
    let dim = width;
    let flat: Vec<f64> = frozen
        .iter()
        .flat_map(|f| f.iter().map(|&v| v.to_f64()))
        .collect();
    let task_dist = fit_task_stats(&flat, frozen.len(), dim, task, &model.routing_cfg)?;

    let classes = data.text.len();
    let mut class_dists = Vec::with_capacity(classes);
    for class_id in 0..classes {
        let member_rows: Vec<usize> = data
            .train
            .labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == class_id).then_some(i))
            .collect();
        if member_rows.is_empty() {
            return Err(Error::State(format!(
                "class {class_id} has no training samples"
            )));
        }
        let class_flat: Vec<f64> = member_rows
            .iter()
            .flat_map(|&i| frozen[i].iter().map(|&v| v.to_f64()))
            .collect();
        class_dists.push(fit_class_stats(
            &class_flat,
            member_rows.len(),
            dim,
            task,
            class_id,
            &model.routing_cfg,
        )?);
    }
    model.task_stats.push(task_dist);
    model.class_stats.push(class_dists);

    Ok(SessionTelemetry { epoch_losses })
}
