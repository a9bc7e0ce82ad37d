//! Two-stage Gaussian confidence routing over frozen backbone features.
//!
//! At train time a task-level Gaussian and per-class Gaussians are fitted
//! from the session's frozen features. At inference, stage one thresholds
//! the sigmoid of the best task log-likelihood: confident hits use the full
//! prompt weight, clear misses fall back to the frozen backbone, and the
//! middle band is re-scored against the chosen task's class Gaussians (mean
//! sigmoid of the top-K class scores becomes the prompt weight).
//!
//! All routing math runs in f64 regardless of the model's scalar type.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompts::{select_pool, sigmoid};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RoutingConfig {
    pub lower_bound: f64,
    pub upper_bound: f64,
    /// Classes averaged in stage two (clamped to the class count).
    pub top_k: usize,
    /// Ridge added to the task-level covariance.
    pub lambda_task: f64,
    /// Ridge added to the class-level covariance.
    pub lambda_class: f64,
    /// Added to every log-likelihood before the sigmoid; calibration knob,
    /// 0 by default.
    pub score_offset: f64,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        RoutingConfig {
            lower_bound: 0.2,
            upper_bound: 0.8,
            top_k: 5,
            lambda_task: 1e-7,
            lambda_class: 1e-3,
            score_offset: 0.0,
        }
    }
}

impl RoutingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.lower_bound && self.lower_bound < self.upper_bound && self.upper_bound <= 1.0)
        {
            return Err(Error::Config(format!(
                "routing bounds must satisfy 0 <= lower < upper <= 1, got {} / {}",
                self.lower_bound, self.upper_bound
            )));
        }
        if self.top_k == 0 {
            return Err(Error::Config("routing.top_k must be >= 1".into()));
        }
        if self.lambda_task <= 0.0 || self.lambda_class <= 0.0 {
            return Err(Error::Config("routing regularizers must be > 0".into()));
        }
        Ok(())
    }
}

/// Fitted Gaussian with a cached Cholesky factor of the regularized
/// covariance. The raw (unregularized) covariance is kept for serialization.
#[derive(Clone, Debug)]
pub struct GaussianStats {
    mean: Vec<f64>,
    raw_cov: Vec<f64>,
    chol: Vec<f64>,
    log_det: f64,
    dim: usize,
    lambda: f64,
}

impl GaussianStats {
    /// Regularize `cov` with `lambda * I` and cache its factorization.
    pub fn from_covariance(mean: Vec<f64>, cov: Vec<f64>, lambda: f64) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d * d {
            return Err(Error::Dimension(format!(
                "covariance has {} entries for dimension {d}",
                cov.len()
            )));
        }
        // symmetry within 1e-9 is part of the fitted-stats contract
        for i in 0..d {
            for j in i + 1..d {
                if (cov[i * d + j] - cov[j * d + i]).abs() > 1e-9 {
                    return Err(Error::Numeric(format!(
                        "covariance asymmetric at ({i}, {j}): {} vs {}",
                        cov[i * d + j],
                        cov[j * d + i]
                    )));
                }
            }
        }
        let mut reg = cov.clone();
        for i in 0..d {
            reg[i * d + i] += lambda;
        }
        let (chol, log_det) = cholesky(&reg, d).map_err(|pivot| {
            Error::Numeric(format!(
                "covariance factorization failed at pivot {pivot} (lambda {lambda:e}, \
                 diag range [{:e}, {:e}])",
                (0..d).map(|i| reg[i * d + i]).fold(f64::INFINITY, f64::min),
                (0..d).map(|i| reg[i * d + i]).fold(f64::NEG_INFINITY, f64::max),
            ))
        })?;
        Ok(GaussianStats {
            mean,
            raw_cov: cov,
            chol,
            log_det,
            dim: d,
            lambda,
        })
    }

    /// Sample mean and covariance (normalized by N) of row-major features.
    pub fn fit(features: &[f64], n: usize, dim: usize, lambda: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Argument("cannot fit statistics from zero samples".into()));
        }
        if features.len() != n * dim {
            return Err(Error::Dimension(format!(
                "feature matrix has {} entries, expected {n} x {dim}",
                features.len()
            )));
        }
        let inv_n = 1.0 / n as f64;
        let mut mean = vec![0.0; dim];
        for r in 0..n {
            for j in 0..dim {
                mean[j] += features[r * dim + j];
            }
        }
        for m in mean.iter_mut() {
            *m *= inv_n;
        }
        let mut cov = vec![0.0; dim * dim];
        let mut centered = vec![0.0; dim];
        for r in 0..n {
            for j in 0..dim {
                centered[j] = features[r * dim + j] - mean[j];
            }
            for i in 0..dim {
                let ci = centered[i];
                for j in i..dim {
                    cov[i * dim + j] += ci * centered[j];
                }
            }
        }
        for i in 0..dim {
            for j in i..dim {
                cov[i * dim + j] *= inv_n;
                cov[j * dim + i] = cov[i * dim + j];
            }
        }
        Self::from_covariance(mean, cov, lambda)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Unregularized sample covariance.
    pub fn raw_covariance(&self) -> &[f64] {
        &self.raw_cov
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Gaussian log density via the cached factor; no explicit inverse.
    pub fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::Dimension(format!(
                "log_pdf: point has {} entries, distribution is {}-dimensional",
                x.len(),
                self.dim
            )));
        }
        let d = self.dim;
        // forward solve L y = (x - mean); Mahalanobis term is |y|^2
        let mut y = vec![0.0; d];
        for i in 0..d {
            let mut acc = x[i] - self.mean[i];
            for k in 0..i {
                acc -= self.chol[i * d + k] * y[k];
            }
            y[i] = acc / self.chol[i * d + i];
        }
        let maha: f64 = y.iter().map(|v| v * v).sum();
        Ok(-0.5 * (maha + d as f64 * (2.0 * std::f64::consts::PI).ln() + self.log_det))
    }
}

/// Lower-triangular Cholesky factor and log-determinant; `Err(pivot)` on a
/// non-positive pivot.
fn cholesky(a: &[f64], d: usize) -> std::result::Result<(Vec<f64>, f64), usize> {
    let mut l = vec![0.0; d * d];
    let mut log_det = 0.0;
    for i in 0..d {
        for j in 0..=i {
            let mut acc = a[i * d + j];
            for k in 0..j {
                acc -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if acc <= 0.0 || !acc.is_finite() {
                    return Err(i);
                }
                let root = acc.sqrt();
                l[i * d + i] = root;
                log_det += 2.0 * root.ln();
            } else {
                l[i * d + j] = acc / l[j * d + j];
            }
        }
    }
    Ok((l, log_det))
}

/// Task-level feature Gaussian.
pub struct TaskDistribution {
    pub task_id: usize,
    pub stats: GaussianStats,
}

/// Class-level feature Gaussian inside one task.
pub struct ClassDistribution {
    pub task_id: usize,
    pub class_id: usize,
    pub stats: GaussianStats,
}

/// Fit the task-level Gaussian of one session's frozen features.
pub fn fit_task_stats(
    features: &[f64],
    n: usize,
    dim: usize,
    task_id: usize,
    cfg: &RoutingConfig,
) -> Result<TaskDistribution> {
    Ok(TaskDistribution {
        task_id,
        stats: GaussianStats::fit(features, n, dim, cfg.lambda_task)?,
    })
}

/// Fit one class-level Gaussian. A single-sample class degenerates to the
/// pure ridge, which keeps few-shot runs well-defined.
pub fn fit_class_stats(
    features: &[f64],
    n: usize,
    dim: usize,
    task_id: usize,
    class_id: usize,
    cfg: &RoutingConfig,
) -> Result<ClassDistribution> {
    Ok(ClassDistribution {
        task_id,
        class_id,
        stats: GaussianStats::fit(features, n, dim, cfg.lambda_class)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoutingStage {
    ShortCircuitOff,
    ShortCircuitOn,
    StageTwo,
}

impl RoutingStage {
    pub fn name(self) -> &'static str {
        match self {
            RoutingStage::ShortCircuitOff => "short_circuit_off",
            RoutingStage::ShortCircuitOn => "short_circuit_on",
            RoutingStage::StageTwo => "stage_two",
        }
    }
}

#[derive(Clone, Debug)]
pub struct RoutingDecision {
    /// Chosen task (stage-one argmax; stage two never revises it).
    pub task: usize,
    pub stage: RoutingStage,
    /// Prompt weight in [0, 1].
    pub weight: f64,
    /// Stage-one confidence sigmoid(E'_max + offset).
    pub confidence: f64,
    /// Per-task log-likelihood scores E'.
    pub task_scores: Vec<f64>,
}

/// Stage-one outcome before any class-level refinement.
pub enum StageOne {
    Done(RoutingDecision),
    Pending {
        task: usize,
        confidence: f64,
        task_scores: Vec<f64>,
    },
}

/// Threshold the best task score. Bounds are closed on both ends: hitting
/// the lower bound already falls back to the frozen backbone, hitting the
/// upper bound already commits to the full prompt weight.
pub fn stage_one_decision(task_scores: Vec<f64>, cfg: &RoutingConfig) -> Result<StageOne> {
    let task = select_pool(&task_scores)
        .map_err(|_| Error::State("stage_one: no fitted task distributions".into()))?;
    let confidence = sigmoid(task_scores[task] + cfg.score_offset);
    if confidence <= cfg.lower_bound {
        return Ok(StageOne::Done(RoutingDecision {
            task,
            stage: RoutingStage::ShortCircuitOff,
            weight: 0.0,
            confidence,
            task_scores,
        }));
    }
    if confidence >= cfg.upper_bound {
        return Ok(StageOne::Done(RoutingDecision {
            task,
            stage: RoutingStage::ShortCircuitOn,
            weight: 1.0,
            confidence,
            task_scores,
        }));
    }
    Ok(StageOne::Pending {
        task,
        confidence,
        task_scores,
    })
}

/// Evaluate all task log-likelihoods for one feature vector and threshold.
pub fn stage_one(x: &[f64], tasks: &[TaskDistribution], cfg: &RoutingConfig) -> Result<StageOne> {
    if tasks.is_empty() {
        return Err(Error::State("stage_one: no fitted task distributions".into()));
    }
    let scores = tasks
        .iter()
        .map(|t| t.stats.log_pdf(x))
        .collect::<Result<Vec<f64>>>()?;
    stage_one_decision(scores, cfg)
}

/// Mean sigmoid of the top-K class scores within the chosen task.
pub fn stage_two(x: &[f64], classes: &[ClassDistribution], cfg: &RoutingConfig) -> Result<f64> {
    if classes.is_empty() {
        return Err(Error::State("stage_two: no class distributions for chosen task".into()));
    }
    let mut scores = classes
        .iter()
        .map(|c| c.stats.log_pdf(x))
        .collect::<Result<Vec<f64>>>()?;
    scores.sort_by(|a, b| b.partial_cmp(a).expect("log-pdfs are finite"));
    let k = cfg.top_k.min(scores.len());
    let total: f64 = scores[..k]
        .iter()
        .map(|&s| sigmoid(s + cfg.score_offset))
        .sum();
    Ok(total / k as f64)
}

/// Full per-instance routing: stage one, then class-level refinement when the
/// confidence lands between the bounds.
pub fn route_instance(
    x: &[f64],
    tasks: &[TaskDistribution],
    classes_by_task: &[Vec<ClassDistribution>],
    cfg: &RoutingConfig,
) -> Result<RoutingDecision> {
    match stage_one(x, tasks, cfg)? {
        StageOne::Done(decision) => Ok(decision),
        StageOne::Pending {
            task,
            confidence,
            task_scores,
        } => {
            let classes = classes_by_task
                .get(task)
                .filter(|c| !c.is_empty())
                .ok_or_else(|| {
                    Error::State(format!("stage_two: task {task} has no class statistics"))
                })?;
            let weight = stage_two(x, classes, cfg)?;
            Ok(RoutingDecision {
                task,
                stage: RoutingStage::StageTwo,
                weight,
                confidence,
                task_scores,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{split_stream, standard_normal};

    fn identity_stats(d: usize) -> GaussianStats {
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            cov[i * d + i] = 1.0;
        }
        GaussianStats::from_covariance(vec![0.0; d], cov, 0.0).unwrap()
    }

    #[test]
    fn log_pdf_at_mean_with_identity_cov() {
        let d = 5;
        let s = identity_stats(d);
        let got = s.log_pdf(&vec![0.0; d]).unwrap();
        let want = -(d as f64 / 2.0) * (2.0 * std::f64::consts::PI).ln();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn log_pdf_scalar_closed_form() {
        let s = GaussianStats::from_covariance(vec![0.0], vec![1.0], 0.0).unwrap();
        let got = s.log_pdf(&[1.0]).unwrap();
        let want = -0.5 - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((got - want).abs() < 1e-12);
        assert!((want + 1.41894).abs() < 1e-5);
    }

    #[test]
    fn fit_identical_points_is_pure_ridge() {
        let d = 3;
        let p = [1.0, -2.0, 0.5];
        let features: Vec<f64> = p.iter().cycle().take(4 * d).copied().collect();
        let s = GaussianStats::fit(&features, 4, d, 1e-7).unwrap();
        assert_eq!(s.mean(), &p);
        for i in 0..d {
            for j in 0..d {
                let want = 0.0; // raw covariance of identical points
                assert!((s.raw_covariance()[i * d + j] - want).abs() < 1e-12);
            }
        }
        // regularized factorization exists and log|lambda I| = d ln(lambda)
        let x = s.log_pdf(&p).unwrap();
        let want = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + d as f64 * (1e-7f64).ln());
        assert!((x - want).abs() < 1e-9);
    }

    #[test]
    fn fit_two_point_hand_covariance() {
        let d = 3;
        let features = vec![1.0, 0.0, 0.0, -1.0, 0.0, 0.0];
        let s = GaussianStats::fit(&features, 2, d, 1e-7).unwrap();
        assert_eq!(s.mean(), &[0.0, 0.0, 0.0]);
        let cov = s.raw_covariance();
        assert!((cov[0] - 1.0).abs() < 1e-12);
        for (idx, &c) in cov.iter().enumerate() {
            if idx != 0 {
                assert!(c.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fit_matches_two_pass_oracle() {
        let mut rng = split_stream(41, "fit-oracle");
        let (n, d) = (200, 8);
        let feats: Vec<f64> = (0..n * d).map(|_| standard_normal(&mut rng) * 1.7).collect();
        let s = GaussianStats::fit(&feats, n, d, 1e-7).unwrap();
        // independent two-pass oracle
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for j in 0..d {
                mean[j] += feats[r * d + j];
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let mut cov = vec![0.0; d * d];
        for r in 0..n {
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += (feats[r * d + i] - mean[i]) * (feats[r * d + j] - mean[j]);
                }
            }
        }
        for c in cov.iter_mut() {
            *c /= n as f64;
        }
        for j in 0..d {
            assert!((s.mean()[j] - mean[j]).abs() <= 1e-10);
        }
        for idx in 0..d * d {
            assert!((s.raw_covariance()[idx] - cov[idx]).abs() <= 1e-10);
        }
    }

    #[test]
    fn zero_samples_rejected() {
        assert!(matches!(
            GaussianStats::fit(&[], 0, 4, 1e-7),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn log_pdf_is_maximized_at_the_mean() {
        let mut rng = split_stream(43, "maxmean");
        let d = 6;
        let n = 300;
        let feats: Vec<f64> = (0..n * d).map(|_| standard_normal(&mut rng)).collect();
        let s = GaussianStats::fit(&feats, n, d, 1e-7).unwrap();
        let at_mean = s.log_pdf(s.mean().to_vec().as_slice()).unwrap();
        for _ in 0..50 {
            let perturbed: Vec<f64> = s
                .mean()
                .iter()
                .map(|&m| m + standard_normal(&mut rng) * 0.5)
                .collect();
            assert!(s.log_pdf(&perturbed).unwrap() <= at_mean + 1e-12);
        }
    }

    #[test]
    fn translation_equivariance() {
        let mut rng = split_stream(47, "translate");
        let (n, d) = (100, 5);
        let feats: Vec<f64> = (0..n * d).map(|_| standard_normal(&mut rng)).collect();
        let shift: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng) * 3.0).collect();
        let shifted: Vec<f64> = feats
            .iter()
            .enumerate()
            .map(|(idx, &v)| v + shift[idx % d])
            .collect();
        let s0 = GaussianStats::fit(&feats, n, d, 1e-7).unwrap();
        let s1 = GaussianStats::fit(&shifted, n, d, 1e-7).unwrap();
        let x: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng)).collect();
        let x_shift: Vec<f64> = x.iter().zip(&shift).map(|(a, b)| a + b).collect();
        let e0 = s0.log_pdf(&x).unwrap();
        let e1 = s1.log_pdf(&x_shift).unwrap();
        assert!((e0 - e1).abs() < 1e-9, "{e0} vs {e1}");
    }

    #[test]
    fn stage_one_threshold_cases() {
        let cfg = RoutingConfig::default();
        // strongly negative best score: frozen-backbone path
        match stage_one_decision(vec![-10.0, -12.0], &cfg).unwrap() {
            StageOne::Done(d) => {
                assert_eq!(d.stage, RoutingStage::ShortCircuitOff);
                assert_eq!(d.weight, 0.0);
                assert_eq!(d.task, 0);
                assert!(d.confidence < 1e-4);
            }
            _ => panic!("expected short-circuit off"),
        }
        // strongly positive: full prompt weight
        match stage_one_decision(vec![3.0, 10.0], &cfg).unwrap() {
            StageOne::Done(d) => {
                assert_eq!(d.stage, RoutingStage::ShortCircuitOn);
                assert_eq!(d.weight, 1.0);
                assert_eq!(d.task, 1);
                assert!(d.confidence > 0.9999);
            }
            _ => panic!("expected short-circuit on"),
        }
        // sigmoid(0) = 0.5 sits strictly between the default bounds
        match stage_one_decision(vec![0.0], &cfg).unwrap() {
            StageOne::Pending { confidence, .. } => assert_eq!(confidence, 0.5),
            _ => panic!("expected stage two"),
        }
        assert!(stage_one_decision(vec![], &cfg).is_err());
    }

    #[test]
    fn stage_one_argmax_invariant_under_monotone_transform() {
        let cfg = RoutingConfig::default();
        let scores = vec![-5.0, -2.0, -9.0, -2.5];
        let transformed: Vec<f64> = scores.iter().map(|&s| sigmoid(s)).collect();
        let pick = |v: Vec<f64>| match stage_one_decision(v, &cfg).unwrap() {
            StageOne::Done(d) => d.task,
            StageOne::Pending { task, .. } => task,
        };
        assert_eq!(pick(scores), pick(transformed));
    }

    fn class_fixture(cfg: &RoutingConfig) -> Vec<ClassDistribution> {
        let mut rng = split_stream(53, "classes");
        let d = 4;
        let mut out = Vec::new();
        for (cid, center) in [(0usize, 0.5f64), (1usize, -0.5f64)] {
            let n = 200;
            let mut feats = vec![0.0; n * d];
            for r in 0..n {
                for j in 0..d {
                    feats[r * d + j] = if j == 0 { center } else { 0.0 }
                        + standard_normal(&mut rng) * 0.25;
                }
            }
            out.push(fit_class_stats(&feats, n, d, 0, cid, cfg).unwrap());
        }
        out
    }

    #[test]
    fn stage_two_top_k_and_degenerate_cases() {
        let cfg = RoutingConfig::default();
        let classes = class_fixture(&cfg);

        // K = 1 degenerates to the sigmoid of the best class score
        let one = RoutingConfig { top_k: 1, ..cfg };
        let x = vec![0.5, 0.0, 0.0, 0.0];
        let best = classes
            .iter()
            .map(|c| c.stats.log_pdf(&x).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        let got = stage_two(&x, &classes, &one).unwrap();
        assert!((got - sigmoid(best)).abs() < 1e-12);

        // K beyond the class count equals the mean over all classes
        let big = RoutingConfig { top_k: 10, ..cfg };
        let got = stage_two(&x, &classes, &big).unwrap();
        let want: f64 = classes
            .iter()
            .map(|c| sigmoid(c.stats.log_pdf(&x).unwrap()))
            .sum::<f64>()
            / classes.len() as f64;
        assert!((got - want).abs() < 1e-12);

        assert!(stage_two(&x, &[], &cfg).is_err());
    }

    #[test]
    fn stage_two_matches_sort_then_average_oracle() {
        let cfg = RoutingConfig {
            top_k: 3,
            ..RoutingConfig::default()
        };
        let classes = {
            let mut rng = split_stream(59, "sort-oracle");
            let d = 3;
            (0..5usize)
                .map(|cid| {
                    let n = 50;
                    let feats: Vec<f64> = (0..n * d)
                        .map(|_| standard_normal(&mut rng) + cid as f64)
                        .collect();
                    fit_class_stats(&feats, n, d, 0, cid, &cfg).unwrap()
                })
                .collect::<Vec<_>>()
        };
        let x = vec![1.3, 0.2, 2.0];
        let mut scores: Vec<f64> = classes
            .iter()
            .map(|c| c.stats.log_pdf(&x).unwrap())
            .collect();
        scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let want: f64 = scores[..3].iter().map(|&s| sigmoid(s)).sum::<f64>() / 3.0;
        assert!((stage_two(&x, &classes, &cfg).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn route_instance_synthetic_fixtures() {
        let cfg = RoutingConfig::default();
        let mut rng = split_stream(61, "route");
        let d = 4;
        // two well-separated tight task clusters
        let mut tasks = Vec::new();
        let mut classes_by_task = Vec::new();
        for t in 0..2usize {
            let n = 400;
            let mut feats = vec![0.0; n * d];
            for r in 0..n {
                for j in 0..d {
                    feats[r * d + j] =
                        10.0 * t as f64 + standard_normal(&mut rng) * 0.1;
                }
            }
            tasks.push(fit_task_stats(&feats, n, d, t, &cfg).unwrap());
            // single broad class so stage two stays defined
            classes_by_task.push(vec![
                fit_class_stats(&feats, n, d, t, 0, &cfg).unwrap()
            ]);
        }
        // at a task mean: confident hit
        let hit = route_instance(&vec![10.0; d], &tasks, &classes_by_task, &cfg).unwrap();
        assert_eq!(hit.stage, RoutingStage::ShortCircuitOn);
        assert_eq!(hit.task, 1);
        assert_eq!(hit.weight, 1.0);

        // far from everything: frozen backbone
        let miss = route_instance(&vec![80.0; d], &tasks, &classes_by_task, &cfg).unwrap();
        assert_eq!(miss.stage, RoutingStage::ShortCircuitOff);
        assert_eq!(miss.weight, 0.0);

        // mid-band fixture: task of two class clusters, probe between them
        let cfg2 = RoutingConfig::default();
        let mut feats = Vec::new();
        for center in [0.5f64, -0.5] {
            for _ in 0..200 {
                for j in 0..d {
                    feats.push(if j == 0 { center } else { 0.0 } + standard_normal(&mut rng) * 0.25);
                }
            }
        }
        let task = fit_task_stats(&feats, 400, d, 0, &cfg2).unwrap();
        let c0 = fit_class_stats(&feats[..200 * d], 200, d, 0, 0, &cfg2).unwrap();
        let c1 = fit_class_stats(&feats[200 * d..], 200, d, 0, 1, &cfg2).unwrap();
        let mid = route_instance(&vec![0.0; d], &[task], &[vec![c0, c1]], &cfg2).unwrap();
        assert_eq!(mid.stage, RoutingStage::StageTwo);
        assert!(
            mid.weight > 0.0 && mid.weight < 1.0,
            "weight {} not strictly inside (0, 1)",
            mid.weight
        );
    }

    #[test]
    fn weights_always_in_unit_interval_and_stage_consistent() {
        let cfg = RoutingConfig::default();
        let mut rng = split_stream(67, "unit");
        let d = 3;
        let n = 100;
        let feats: Vec<f64> = (0..n * d).map(|_| standard_normal(&mut rng)).collect();
        let tasks = vec![fit_task_stats(&feats, n, d, 0, &cfg).unwrap()];
        let classes = vec![vec![fit_class_stats(&feats, n, d, 0, 0, &cfg).unwrap()]];
        for _ in 0..200 {
            let x: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng) * 5.0).collect();
            let dec = route_instance(&x, &tasks, &classes, &cfg).unwrap();
            assert!((0.0..=1.0).contains(&dec.weight));
            match dec.stage {
                RoutingStage::ShortCircuitOff => assert_eq!(dec.weight, 0.0),
                RoutingStage::ShortCircuitOn => assert_eq!(dec.weight, 1.0),
                RoutingStage::StageTwo => {
                    assert!(dec.weight > 0.0 && dec.weight < 1.0)
                }
            }
        }
    }
}
