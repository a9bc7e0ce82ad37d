//! Task-identifier-free evaluation over the whole stream.

use rand_chacha::ChaCha8Rng;

use crate::diff::Tensor;
use crate::encoder::{classify, NoInjection};
use crate::error::Result;
use crate::gate::gate_usage_stats;
use crate::prompts::{select_pool, sigmoid, text_prompt_weight};
use crate::rng::split_stream;
use crate::routing::route_instance;
use crate::scalar::Real;

use super::domain::DomainData;
use super::state::PromptedModel;
use super::train::OptimConfig;

/// Frozen test-split features, computed once per task and reused across
/// sessions (the backbone never changes).
pub struct FeatureCache<F: Real> {
    per_task: Vec<Option<Vec<Vec<F>>>>,
}

impl<F: Real> FeatureCache<F> {
    pub fn new(tasks: usize) -> Self {
        FeatureCache {
            per_task: (0..tasks).map(|_| None).collect(),
        }
    }

    fn get_or_compute(
        &mut self,
        task: usize,
        model: &PromptedModel<F>,
        data: &DomainData<F>,
    ) -> Result<&Vec<Vec<F>>> {
        if self.per_task[task].is_none() {
            self.per_task[task] = Some(model.encoder.frozen_features(&data.test)?);
        }
        Ok(self.per_task[task].as_ref().expect("just filled"))
    }
}

/// One routing telemetry record per evaluated instance.
pub struct TelemetryRow {
    pub instance_id: String,
    pub task_chosen: usize,
    pub stage: String,
    pub confidence: f64,
    pub weight: f64,
}

pub struct EvalOutcome {
    /// Accuracy per task, in stream order.
    pub accuracies: Vec<f64>,
    /// Mean open prompt gates per instance, per task.
    pub mean_open_layers: Vec<f64>,
    pub telemetry: Vec<TelemetryRow>,
}

/// Evaluate every task's test split after `session` sessions. Instances are
/// routed without task identifiers; whatever the router decides drives the
/// prompts and gates. With no seen tasks this is the zero-shot row.
pub fn evaluate_all<F: Real>(
    model: &PromptedModel<F>,
    stream: &[DomainData<F>],
    session_label: &str,
    optim: &OptimConfig,
    master_seed: u64,
    ablate_cddp: bool,
    cache: &mut FeatureCache<F>,
) -> Result<EvalOutcome> {
    let seen = model.seen_tasks();
    let width = model.encoder.config().width;
    let mut accuracies = Vec::with_capacity(stream.len());
    let mut mean_open = Vec::with_capacity(stream.len());
    let mut telemetry = Vec::new();

    for (j, data) in stream.iter().enumerate() {
        let features = cache.get_or_compute(j, model, data)?.clone();
        let total = data.test.len();
        let mut correct = 0usize;
        let mut usage: Vec<Vec<crate::gate::GateDecision<F>>> = Vec::with_capacity(total);
        let mut eval_rng: ChaCha8Rng =
            split_stream(master_seed, &format!("eval/{session_label}/task{j}"));

        let indices: Vec<usize> = (0..total).collect();
        for chunk in indices.chunks(optim.eval_batch_size) {
            let sub = data.test.select(chunk)?;
            if seen == 0 {
                let img = model.encoder.encode_image(&sub, &NoInjection)?;
                let txt = model.encoder.encode_text(&data.text, &NoInjection)?;
                let preds = classify(&img, &txt);
                correct += preds
                    .iter()
                    .zip(&sub.labels)
                    .filter(|(p, l)| p == l)
                    .count();
                usage.extend(chunk.iter().map(|_| Vec::new()));
                continue;
            }

            // route every instance in the frozen feature space
            let mut routed: Vec<(usize, f64)> = Vec::with_capacity(chunk.len());
            let mut max_scores: Vec<f64> = Vec::with_capacity(chunk.len());
            let mut mean_scores = vec![0.0f64; seen];
            for (&i, _) in chunk.iter().zip(0..) {
                let x: Vec<f64> = features[i].iter().map(|&v| v.to_f64()).collect();
                if ablate_cddp {
                    let scores: Vec<f64> = model
                        .task_stats
                        .iter()
                        .map(|t| t.stats.log_pdf(&x))
                        .collect::<Result<_>>()?;
                    let r = select_pool(&scores)?;
                    let conf = sigmoid(scores[r] + model.routing_cfg.score_offset);
                    for (acc, s) in mean_scores.iter_mut().zip(&scores) {
                        *acc += s;
                    }
                    max_scores.push(scores[r]);
                    routed.push((r, conf));
                    telemetry.push(TelemetryRow {
                        instance_id: format!("{session_label}-t{j}-i{i}"),
                        task_chosen: r,
                        stage: "stage_one_only".into(),
                        confidence: conf,
                        weight: conf,
                    });
                } else {
                    let decision =
                        route_instance(&x, &model.task_stats, &model.class_stats, &model.routing_cfg)?;
                    for (acc, s) in mean_scores.iter_mut().zip(&decision.task_scores) {
                        *acc += s;
                    }
                    max_scores.push(decision.task_scores[decision.task]);
                    routed.push((decision.task, decision.weight));
                    telemetry.push(TelemetryRow {
                        instance_id: format!("{session_label}-t{j}-i{i}"),
                        task_chosen: decision.task,
                        stage: decision.stage.name().into(),
                        confidence: decision.confidence,
                        weight: decision.weight,
                    });
                }
            }

            let feats: Vec<Tensor<F>> = chunk
                .iter()
                .map(|&i| Tensor::from_vec(vec![width], features[i].clone()).expect("feature shape"))
                .collect();
            let (plan, decisions) = model.eval_plan(&routed, &feats, &mut eval_rng)?;
            let img = model.encoder.encode_image(&sub, &plan)?;

            // batch-level text prompting: majority task by mean score,
            // weighted by the mean sigmoid of per-instance best scores
            let text_task = select_pool(&mean_scores)?;
            let text_weight = text_prompt_weight(
                &max_scores
                    .iter()
                    .map(|&s| s + model.routing_cfg.score_offset)
                    .collect::<Vec<f64>>(),
            )?;
            let text_plan = model.text_plan(text_task, text_weight, data.text.len())?;
            let txt = model.encoder.encode_text(&data.text, &text_plan)?;

            let preds = classify(&img, &txt);
            correct += preds
                .iter()
                .zip(&sub.labels)
                .filter(|(p, l)| p == l)
                .count();
            usage.extend(decisions);
        }

        accuracies.push(correct as f64 / total as f64);
        mean_open.push(gate_usage_stats(&usage)?);
    }

    Ok(EvalOutcome {
        accuracies,
        mean_open_layers: mean_open,
        telemetry,
    })
}
