//! Full model state across an incremental run, plus injection-plan builders
//! that tie prompts, gates and routing weights together.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{ParameterSet, Tensor};
use crate::encoder::DualEncoder;
use crate::error::{Error, Result};
use crate::gate::{GateConfig, GateDecision, GateMode, GateParams};
use crate::prompts::{EncoderSide, Multiplier, PlannedInjection, PromptLibrary};
use crate::routing::{ClassDistribution, RoutingConfig, TaskDistribution};
use crate::scalar::Real;

/// Which mechanisms are disabled for this run. Disabling instance gating
/// forces every gate open (plain prompt injection); disabling class-driven
/// routing uses the raw stage-one confidence as the prompt weight with no
/// bounds and no class refinement.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub ia_gp: bool,
    pub ia_cddp: bool,
}

/// Frozen backbone plus everything the incremental sessions add.
pub struct PromptedModel<F: Real> {
    pub encoder: DualEncoder<F>,
    pub prompts: PromptLibrary<F>,
    pub gates: Vec<GateParams<F>>,
    pub task_stats: Vec<TaskDistribution>,
    pub class_stats: Vec<Vec<ClassDistribution>>,
    pub gate_cfg: GateConfig,
    pub routing_cfg: RoutingConfig,
}

impl<F: Real> PromptedModel<F> {
    /// Wrap a pre-trained encoder; the backbone is frozen here and never
    /// unfrozen again.
    pub fn new(
        encoder: DualEncoder<F>,
        prompt_len: usize,
        gate_cfg: GateConfig,
        routing_cfg: RoutingConfig,
    ) -> Result<Self> {
        gate_cfg.validate()?;
        routing_cfg.validate()?;
        encoder.freeze();
        let prompts = PromptLibrary::new(
            prompt_len,
            encoder.config().width,
            encoder.vision_depth(),
            encoder.text_depth(),
        );
        Ok(PromptedModel {
            encoder,
            prompts,
            gates: Vec::new(),
            task_stats: Vec::new(),
            class_stats: Vec::new(),
            gate_cfg,
            routing_cfg,
        })
    }

    pub fn seen_tasks(&self) -> usize {
        self.prompts.task_count()
    }

    /// Allocate pools and gates for the next task.
    pub fn begin_task(&mut self, task: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        self.prompts.add_task(task, rng)?;
        self.gates.push(GateParams::new(
            self.encoder.config().width,
            self.encoder.vision_depth(),
            self.gate_cfg,
            rng,
        )?);
        Ok(())
    }

    /// Trainable parameters of one session: the task's pools and gates.
    pub fn session_parameters(&self, task: usize) -> Result<ParameterSet<F>> {
        let mut ps = self.prompts.task_parameters(task)?;
        let gates = self
            .gates
            .get(task)
            .ok_or_else(|| Error::State(format!("task {task} has no gates")))?;
        ps.extend_from(&gates.parameters(task)?)?;
        Ok(ps)
    }

    pub fn freeze_task(&self, task: usize) -> Result<()> {
        self.prompts.freeze_task(task)?;
        self.gates
            .get(task)
            .ok_or_else(|| Error::State(format!("task {task} has no gates")))?
            .freeze();
        Ok(())
    }

    /// Digest of one task's pools and gates (isolation checks).
    pub fn task_checksum(&self, task: usize) -> Result<u64> {
        let mut ps = self.prompts.task_parameters(task)?;
        ps.extend_from(&self.gates[task].parameters(task)?)?;
        Ok(ps.checksum())
    }

    /// Training-time vision plan for one task: every layer consults its gate
    /// with fresh noise; the residual multiplier keeps the gradient path the
    /// mode demands (straight-through for hard gates).
    pub fn training_plan(
        &self,
        task: usize,
        features: &[Tensor<F>],
        rng: &mut ChaCha8Rng,
    ) -> Result<PlannedInjection<'_, F>> {
        let gates = self
            .gates
            .get(task)
            .ok_or_else(|| Error::State(format!("task {task} has no gates")))?;
        let layers = self.encoder.vision_depth();
        let mut plan = Vec::with_capacity(features.len());
        for feature in features {
            let mut row = Vec::with_capacity(layers);
            for layer in 0..layers {
                let decision = gates.forward(layer, feature, rng, true)?;
                let pool = self
                    .prompts
                    .pool(task, EncoderSide::Vision, layer)
                    .ok_or_else(|| Error::State(format!("missing pool {task}/{layer}")))?;
                let mult = match self.gate_cfg.mode {
                    GateMode::Hard => Some(Multiplier::Node(decision.straight_through()?)),
                    GateMode::Soft => Some(Multiplier::Node(decision.soft_on()?)),
                    GateMode::Random | GateMode::AlwaysOn => {
                        decision.open.then_some(Multiplier::Const(1.0))
                    }
                };
                row.push(mult.map(|m| (pool, m)));
            }
            plan.push(row);
        }
        Ok(PlannedInjection::new(self.encoder.config().heads, plan))
    }

    /// Inference-time vision plan: one (task, weight) routing outcome per
    /// instance. Returns the plan plus each instance's gate decisions for
    /// usage telemetry (instances routed fully off get an empty list).
    #[allow(clippy::type_complexity)]
    pub fn eval_plan(
        &self,
        routed: &[(usize, f64)],
        features: &[Tensor<F>],
        rng: &mut ChaCha8Rng,
    ) -> Result<(PlannedInjection<'_, F>, Vec<Vec<GateDecision<F>>>)> {
        if routed.len() != features.len() {
            return Err(Error::Dimension(format!(
                "{} routing outcomes for {} instances",
                routed.len(),
                features.len()
            )));
        }
        let layers = self.encoder.vision_depth();
        let mut plan = Vec::with_capacity(routed.len());
        let mut decisions = Vec::with_capacity(routed.len());
        for (&(task, weight), feature) in routed.iter().zip(features) {
            if weight == 0.0 {
                plan.push(vec![None; layers]);
                decisions.push(Vec::new());
                continue;
            }
            let gates = self
                .gates
                .get(task)
                .ok_or_else(|| Error::State(format!("routed to unseen task {task}")))?;
            let mut row = Vec::with_capacity(layers);
            let mut recorded = Vec::with_capacity(layers);
            for layer in 0..layers {
                let decision = gates.forward(layer, feature, rng, false)?;
                let mult = match self.gate_cfg.mode {
                    GateMode::Soft => {
                        let m = decision.soft.values()[crate::gate::GATE_ON].to_f64() * weight;
                        (m > 0.0).then_some(Multiplier::Const(m))
                    }
                    _ => decision.open.then_some(Multiplier::Const(weight)),
                };
                let pool = self
                    .prompts
                    .pool(task, EncoderSide::Vision, layer)
                    .ok_or_else(|| Error::State(format!("missing pool {task}/{layer}")))?;
                row.push(mult.map(|m| (pool, m)));
                recorded.push(decision);
            }
            plan.push(row);
            decisions.push(recorded);
        }
        Ok((PlannedInjection::new(self.encoder.config().heads, plan), decisions))
    }

    /// Text-side plan: one task's text pools at a shared batch weight,
    /// repeated for each of `rows` sentences.
    pub fn text_plan(
        &self,
        task: usize,
        weight: f64,
        rows: usize,
    ) -> Result<PlannedInjection<'_, F>> {
        let covered = self.prompts.text_layers();
        let depth = self.encoder.text_depth();
        let mut row_plan = Vec::with_capacity(depth);
        for layer in 0..depth {
            if layer < covered && weight > 0.0 {
                let pool = self
                    .prompts
                    .pool(task, EncoderSide::Text, layer)
                    .ok_or_else(|| Error::State(format!("missing text pool {task}/{layer}")))?;
                row_plan.push(Some((pool, Multiplier::Const(weight))));
            } else {
                row_plan.push(None);
            }
        }
        let plan = (0..rows).map(|_| row_plan.clone()).collect();
        Ok(PlannedInjection::new(self.encoder.config().heads, plan))
    }
}
