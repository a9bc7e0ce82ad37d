//! Instance-aware prompt gates.
//!
//! One small linear head per vision layer maps the frozen pooled image
//! feature to two logits (component 0 = prompt ON, component 1 = OFF). During
//! training the logits get Gumbel noise and a hard one-hot sample whose
//! gradient flows through the soft relaxation; at inference the decision is
//! the noise-free argmax, ties resolving to OFF so the frozen backbone wins.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{ParameterSet, Tensor};
use crate::error::{Error, Result};
use crate::rng::standard_normal;
use crate::scalar::Real;

/// Logit component meanings.
pub const GATE_ON: usize = 0;
pub const GATE_OFF: usize = 1;

/// Gate behavior selector. `Hard` is the real mechanism; the others are
/// baselines reachable purely by configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Hard one-hot sample, straight-through gradient.
    Hard,
    /// No hardening: the soft ON probability multiplies the residual.
    Soft,
    /// Coin flip per layer, ignoring the instance feature.
    Random,
    /// Gate permanently open (plain prompt injection).
    AlwaysOn,
}

impl std::fmt::Display for GateMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            GateMode::Hard => "hard",
            GateMode::Soft => "soft",
            GateMode::Random => "random",
            GateMode::AlwaysOn => "always_on",
        };
        write!(f, "{s}")
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    pub mode: GateMode,
    /// Gumbel softmax temperature.
    pub temperature: f64,
    /// Uniform draws are clamped into [noise_clamp, 1 - noise_clamp].
    pub noise_clamp: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            mode: GateMode::Hard,
            temperature: 3.0,
            noise_clamp: 1e-6,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::Config("gate.temperature must be > 0".into()));
        }
        if !(self.noise_clamp > 0.0 && self.noise_clamp < 0.5) {
            return Err(Error::Config(
                "gate.noise_clamp must lie in (0, 0.5)".into(),
            ));
        }
        Ok(())
    }
}

/// Gumbel transform of a uniform draw, clamped away from the endpoints so the
/// double logarithm stays finite.
pub fn gumbel_from_uniform(u: f64, clamp: f64) -> f64 {
    let u = u.clamp(clamp, 1.0 - clamp);
    -(-u.ln()).ln()
}

/// One standard Gumbel draw.
pub fn gumbel_noise<R: Rng>(rng: &mut R, clamp: f64) -> f64 {
    gumbel_from_uniform(rng.gen::<f64>(), clamp)
}

/// Outcome of one gate evaluation.
pub struct GateDecision<F: Real> {
    /// Probability 2-vector, graph-connected in training mode.
    pub soft: Tensor<F>,
    /// One-hot sample, `hard[GATE_ON] = 1` iff the gate opened.
    pub hard: [f64; 2],
    pub open: bool,
}

impl<F: Real> GateDecision<F> {
    /// Soft ON probability as a scalar tensor.
    pub fn soft_on(&self) -> Result<Tensor<F>> {
        self.soft.pick(GATE_ON)
    }

    /// Straight-through multiplier: evaluates to the hard sample, but its
    /// gradient is the soft probability's.
    pub fn straight_through(&self) -> Result<Tensor<F>> {
        let soft_on = self.soft_on()?;
        let correction = F::from_f64(self.hard[GATE_ON]) - soft_on.item();
        soft_on.add(&Tensor::scalar(correction))
    }
}

/// Per-task gate bank: one linear head per vision layer plus the sampling
/// configuration.
pub struct GateParams<F: Real> {
    weights: Vec<Tensor<F>>, // [d_f, 2] each
    biases: Vec<Tensor<F>>,  // [2] each
    pub cfg: GateConfig,
    feature_dim: usize,
}

impl<F: Real> GateParams<F> {
    pub fn new(
        feature_dim: usize,
        layers: usize,
        cfg: GateConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let std = 1.0 / (feature_dim as f64).sqrt();
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for _ in 0..layers {
            let w: Vec<F> = (0..feature_dim * 2)
                .map(|_| F::from_f64(standard_normal(rng) * std))
                .collect();
            weights.push(Tensor::parameter(vec![feature_dim, 2], w)?);
            biases.push(Tensor::parameter(vec![2], vec![F::zero(); 2])?);
        }
        Ok(GateParams {
            weights,
            biases,
            cfg,
            feature_dim,
        })
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    /// Trainable tensors under their checkpoint names.
    pub fn parameters(&self, task: usize) -> Result<ParameterSet<F>> {
        let mut ps = ParameterSet::new();
        for (layer, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            ps.insert(format!("gate/{task}/{layer}/W"), w.clone())?;
            ps.insert(format!("gate/{task}/{layer}/b"), b.clone())?;
        }
        Ok(ps)
    }

    pub fn freeze(&self) {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            w.set_trainable(false);
            b.set_trainable(false);
        }
    }

    /// Evaluate the gate of one layer on a frozen pooled feature.
    ///
    /// Training mode adds fresh Gumbel noise to the logits; inference is
    /// noise-free and deterministic. Random and always-on modes bypass the
    /// linear head entirely.
    pub fn forward(
        &self,
        layer: usize,
        feature: &Tensor<F>,
        rng: &mut ChaCha8Rng,
        training: bool,
    ) -> Result<GateDecision<F>> {
        if layer >= self.weights.len() {
            return Err(Error::Index(format!(
                "gate layer {layer} out of {}",
                self.weights.len()
            )));
        }
        if feature.len() != self.feature_dim {
            return Err(Error::Dimension(format!(
                "gate feature has {} elements, expected {}",
                feature.len(),
                self.feature_dim
            )));
        }
        match self.cfg.mode {
            GateMode::Random => {
                let open = rng.gen::<f64>() < 0.5;
                return Ok(constant_decision(open));
            }
            GateMode::AlwaysOn => return Ok(constant_decision(true)),
            GateMode::Hard | GateMode::Soft => {}
        }
        let row = feature.reshape(vec![1, self.feature_dim])?;
        let logits = row
            .matmul(&self.weights[layer])?
            .add_row(&self.biases[layer])?;
        let inv_temp = F::from_f64(1.0 / self.cfg.temperature);
        let perturbed = if training {
            let noise: Vec<F> = (0..2)
                .map(|_| F::from_f64(gumbel_noise(rng, self.cfg.noise_clamp)))
                .collect();
            logits.add(&Tensor::from_vec(vec![1, 2], noise)?)?
        } else {
            logits
        };
        let soft = perturbed.scale(inv_temp).softmax(1)?;
        // argmax with ties to OFF: OFF wins unless ON is strictly larger
        let v = soft.to_vec();
        let open = v[GATE_ON].to_f64() > v[GATE_OFF].to_f64();
        let mut hard = [0.0; 2];
        hard[if open { GATE_ON } else { GATE_OFF }] = 1.0;
        Ok(GateDecision { soft, hard, open })
    }
}

fn constant_decision<F: Real>(open: bool) -> GateDecision<F> {
    let (on, off) = if open {
        (F::one(), F::zero())
    } else {
        (F::zero(), F::one())
    };
    let mut hard = [0.0; 2];
    hard[if open { GATE_ON } else { GATE_OFF }] = 1.0;
    GateDecision {
        soft: Tensor::from_vec(vec![1, 2], vec![on, off]).expect("static shape"),
        hard,
        open,
    }
}

/// Gate-modulated residual merge.
///
/// Training keeps the gradient path alive (straight-through for hard mode,
/// plain soft probability for soft mode). Inference folds the routing weight
/// in; a closed gate returns the original output bit-exactly.
pub fn gated_residual<F: Real>(
    original: &Tensor<F>,
    prompt_out: &Tensor<F>,
    decision: &GateDecision<F>,
    weight: f64,
    training: bool,
    mode: GateMode,
) -> Result<Tensor<F>> {
    if !(0.0..=1.0).contains(&weight) {
        return Err(Error::Argument(format!(
            "gated_residual: weight {weight} outside [0, 1]"
        )));
    }
    if original.shape() != prompt_out.shape() {
        return Err(Error::Dimension(format!(
            "gated_residual: {:?} vs {:?}",
            original.shape(),
            prompt_out.shape()
        )));
    }
    if training {
        let mult = match mode {
            GateMode::Soft => decision.soft_on()?,
            _ => decision.straight_through()?,
        };
        original.add(&prompt_out.scale_by(&mult)?)
    } else {
        let mult = match mode {
            GateMode::Soft => decision.soft.values()[GATE_ON].to_f64() * weight,
            _ => decision.hard[GATE_ON] * weight,
        };
        if mult == 0.0 {
            Ok(original.clone())
        } else {
            crate::prompts::prompt_residual(original, prompt_out, mult)
        }
    }
}

/// Mean number of open gates per instance over a stream of decisions.
pub fn gate_usage_stats<F: Real>(instances: &[Vec<GateDecision<F>>]) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::Argument("gate_usage_stats: empty stream".into()));
    }
    let total: usize = instances
        .iter()
        .map(|ds| ds.iter().filter(|d| d.open).count())
        .sum();
    Ok(total as f64 / instances.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::split_stream;

    fn gates(mode: GateMode, seed: &str) -> (GateParams<f64>, ChaCha8Rng) {
        let cfg = GateConfig {
            mode,
            ..GateConfig::default()
        };
        let mut rng = split_stream(17, seed);
        let g = GateParams::new(6, 3, cfg, &mut rng).unwrap();
        (g, rng)
    }

    #[test]
    fn gumbel_transform_closed_form_and_clamp() {
        let g = gumbel_from_uniform(0.5, 1e-6);
        assert!((g - 0.36651292058166435).abs() < 1e-12);
        assert!(gumbel_from_uniform(0.0, 1e-6).is_finite());
        assert!(gumbel_from_uniform(1.0, 1e-6).is_finite());
    }

    #[test]
    fn gumbel_mean_approaches_euler_mascheroni() {
        let mut rng = split_stream(17, "gumbel-mean");
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            acc += gumbel_noise(&mut rng, 1e-6);
        }
        let mean = acc / n as f64;
        assert!((mean - 0.5772).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn saturated_logits_open_the_gate() {
        let (g, mut rng) = gates(GateMode::Hard, "saturated");
        // craft a feature aligned with the ON column minus OFF column
        let w = &g.weights[0].to_vec();
        let mut feature = vec![0.0f64; 6];
        for i in 0..6 {
            feature[i] = 40.0 * (w[i * 2] - w[i * 2 + 1]);
        }
        let f = Tensor::from_vec(vec![6], feature).unwrap();
        let d = g.forward(0, &f, &mut rng, false).unwrap();
        assert!(d.open);
        assert!(d.soft.values()[GATE_ON] > 0.9);
        assert_eq!(d.hard, [1.0, 0.0]);
    }

    #[test]
    fn tied_logits_stay_off() {
        let cfg = GateConfig::default();
        let mut rng = split_stream(19, "tie");
        let mut g = GateParams::<f64>::new(4, 1, cfg, &mut rng).unwrap();
        // force zero weights and biases: logits are exactly (0, 0)
        g.weights[0] = Tensor::from_vec(vec![4, 2], vec![0.0; 8]).unwrap();
        g.biases[0] = Tensor::from_vec(vec![2], vec![0.0; 2]).unwrap();
        let f = Tensor::from_vec(vec![4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let d = g.forward(0, &f, &mut rng, false).unwrap();
        assert_eq!(d.soft.to_vec(), vec![0.5, 0.5]);
        assert!(!d.open);
        assert_eq!(d.hard, [0.0, 1.0]);
    }

    #[test]
    fn hard_vector_is_always_one_hot() {
        let (g, mut rng) = gates(GateMode::Hard, "onehot");
        for i in 0..200 {
            let f = Tensor::from_vec(
                vec![6],
                (0..6).map(|j| ((i * 7 + j * 3) % 11) as f64 - 5.0).collect(),
            )
            .unwrap();
            let d = g.forward(i % 3, &f, &mut rng, true).unwrap();
            assert_eq!(d.hard.iter().sum::<f64>(), 1.0);
            assert!(d.hard[0] == 1.0 || d.hard[1] == 1.0);
        }
    }

    #[test]
    fn low_temperature_soft_matches_argmax() {
        let cfg = GateConfig {
            temperature: 1e-3,
            ..GateConfig::default()
        };
        let mut rng = split_stream(23, "lowtemp");
        let g = GateParams::<f64>::new(4, 1, cfg, &mut rng).unwrap();
        let f = Tensor::from_vec(vec![4], vec![2.0, -1.0, 0.3, 0.9]).unwrap();
        let d = g.forward(0, &f, &mut rng, false).unwrap();
        let v = d.soft.to_vec();
        let argmax_is_on = v[GATE_ON] > v[GATE_OFF];
        let saturated = v[GATE_ON].max(v[GATE_OFF]);
        assert!(saturated > 1.0 - 1e-6);
        assert_eq!(d.open, argmax_is_on);
    }

    #[test]
    fn training_open_rate_matches_gumbel_max_property() {
        // P(argmax(z + g) = ON) should equal softmax(z)[ON]
        let cfg = GateConfig::default();
        let mut rng = split_stream(29, "gmax");
        let mut g = GateParams::<f64>::new(2, 1, cfg, &mut rng).unwrap();
        g.weights[0] = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        g.biases[0] = Tensor::from_vec(vec![2], vec![0.0; 2]).unwrap();
        for (z0, z1) in [(0.4, -0.3), (1.5, 0.0)] {
            let f = Tensor::from_vec(vec![2], vec![z0, z1]).unwrap();
            let want = f64::exp(z0) / (f64::exp(z0) + f64::exp(z1));
            let n = 100_000;
            let mut open = 0usize;
            for _ in 0..n {
                if g.forward(0, &f, &mut rng, true).unwrap().open {
                    open += 1;
                }
            }
            let rate = open as f64 / n as f64;
            assert!((rate - want).abs() < 0.01, "rate {rate} vs {want}");
        }
    }

    #[test]
    fn random_mode_ignores_features() {
        let (g, mut rng) = gates(GateMode::Random, "random");
        let f1 = Tensor::from_vec(vec![6], vec![100.0; 6]).unwrap();
        let n = 20_000;
        let mut open = 0usize;
        for _ in 0..n {
            if g.forward(0, &f1, &mut rng, true).unwrap().open {
                open += 1;
            }
        }
        let rate = open as f64 / n as f64;
        assert!((rate - 0.5).abs() < 0.02, "rate {rate}");
    }

    #[test]
    fn always_on_mode_is_plain_injection() {
        let (g, mut rng) = gates(GateMode::AlwaysOn, "alwayson");
        let f = Tensor::from_vec(vec![6], vec![-50.0; 6]).unwrap();
        for _ in 0..10 {
            let d = g.forward(1, &f, &mut rng, false).unwrap();
            assert!(d.open);
            assert_eq!(d.hard, [1.0, 0.0]);
        }
    }

    #[test]
    fn gated_residual_inference_cases() {
        let ori = Tensor::from_vec(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let pr = Tensor::from_vec(vec![1, 3], vec![0.5, 0.5, 0.5]).unwrap();
        let closed = constant_decision::<f64>(false);
        let open = constant_decision::<f64>(true);

        let out = gated_residual(&ori, &pr, &closed, 0.7, false, GateMode::Hard).unwrap();
        assert_eq!(out.to_vec(), ori.to_vec());

        let out = gated_residual(&ori, &pr, &open, 1.0, false, GateMode::Hard).unwrap();
        assert_eq!(out.to_vec(), vec![1.5, 2.5, 3.5]);

        let out = gated_residual(&ori, &pr, &open, 0.0, false, GateMode::Hard).unwrap();
        assert_eq!(out.to_vec(), ori.to_vec());

        assert!(gated_residual(&ori, &pr, &open, 1.2, false, GateMode::Hard).is_err());
    }

    #[test]
    fn straight_through_forward_is_hard_backward_is_soft() {
        let soft = Tensor::parameter(vec![1, 2], vec![0.3f64, 0.7]).unwrap();
        let d = GateDecision {
            soft: soft.clone(),
            hard: [0.0, 1.0],
            open: false,
        };
        let st = d.straight_through().unwrap();
        assert_eq!(st.item(), 0.0); // forward: hard value
        st.backward().unwrap();
        let g = soft.grad().unwrap();
        assert_eq!(g, vec![1.0, 0.0]); // backward: flows into soft[ON]
    }

    #[test]
    fn usage_stats_counting() {
        let all_open: Vec<Vec<GateDecision<f64>>> = (0..3)
            .map(|_| (0..4).map(|_| constant_decision(true)).collect())
            .collect();
        assert_eq!(gate_usage_stats(&all_open).unwrap(), 4.0);

        let alternating: Vec<Vec<GateDecision<f64>>> = (0..4)
            .map(|i| {
                (0..2)
                    .map(|_| constant_decision(i % 2 == 0))
                    .collect()
            })
            .collect();
        assert_eq!(gate_usage_stats(&alternating).unwrap(), 1.0);

        let empty: Vec<Vec<GateDecision<f64>>> = vec![];
        assert!(gate_usage_stats(&empty).is_err());
    }
}
