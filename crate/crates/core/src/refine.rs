//! Curriculum refinement of a logit volume under the TIB loss.
//!
//! The refinable parameter field is the logit volume itself; its sigmoid is
//! the probability map. Persistence is recomputed at every iteration up to
//! `dense_until`, then only at iterations that are multiples of `interval`.
//! In between, the critical cells of the last barcode are re-read at the
//! current probabilities.

use serde::{Deserialize, Serialize};

use crate::cubical_ph::{compute_ph0, count_components, Barcode};
use crate::error::{Error, Result};
use crate::soft_skeleton::SkeletonParams;
use crate::tib_loss::{
    assemble, correction_at, integrity_from_parts, skeleton_of_foreground,
    structural_from_skeletons, FeatureSplit, TibLossReport, TibWeights, TopoPrior,
};
use crate::volume::{logit_scalar, sigmoid_scalar, Connectivity, Role, Volume};

/// Probabilities are clamped to `[INIT_CLAMP, 1 - INIT_CLAMP]` before taking logits.
pub const INIT_CLAMP: f64 = 1e-6;

/// Threshold for the logged component count.
pub const BETTI_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumConfig {
    /// Last iteration of the dense phase (`t`).
    pub dense_until: usize,
    /// Number of update iterations (`T`).
    pub total: usize,
    /// Recomputation interval of the sparse phase (`k`).
    pub interval: usize,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            dense_until: 30,
            total: 90,
            interval: 3,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        if self.interval == 0 {
            return Err(Error::InvalidParameter("interval k must be at least 1".into()));
        }
        if self.dense_until > self.total {
            return Err(Error::InvalidParameter(format!(
                "dense phase end t={} exceeds total T={}",
                self.dense_until, self.total
            )));
        }
        Ok(())
    }

    pub fn is_dense(&self, i: usize) -> bool {
        i <= self.dense_until
    }
}

/// Iteration whose persistence features are used at iteration `i`.
pub fn schedule_j(i: usize, cfg: &CurriculumConfig) -> usize {
    if i <= cfg.dense_until {
        i
    } else {
        i / cfg.interval * cfg.interval
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerMethod {
    PlainGradient,
    /// Adam with decoupled weight decay.
    AdamW,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub method: OptimizerMethod,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: DEFAULT_LEARNING_RATE,
            method: OptimizerMethod::AdamW,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            epsilon: 1e-8,
        }
    }
}

/// Step size for logit fields, tuned on phantoms.
pub const DEFAULT_LEARNING_RATE: f64 = 0.1;

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidParameter("moment decay rates must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 || self.epsilon <= 0.0 {
            return Err(Error::InvalidParameter(
                "weight decay must be >= 0 and epsilon > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Everything a refinement run depends on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub prior: TopoPrior,
    pub weights: TibWeights,
    pub skeleton: SkeletonParams,
    pub optimizer: OptimizerConfig,
    pub curriculum: CurriculumConfig,
    pub connectivity: Connectivity,
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.skeleton.validate()?;
        self.optimizer.validate()?;
        self.curriculum.validate()
    }
}

/// One row of the refinement log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub iteration: usize,
    pub beta0: usize,
    pub l_cor: f64,
    pub l_com_voxel: f64,
    pub l_com_struct: f64,
    pub l_total: f64,
    pub ph_recomputed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CachedBarcode {
    pub barcode: Barcode,
    pub split: FeatureSplit,
    pub iteration: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct PreviousIterate {
    probs: Vec<f64>,
    skeleton: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
    steps: i32,
}

/// Loss, gradient and bookkeeping for one evaluated iterate.
struct Evaluation {
    report: TibLossReport,
    grad_prob: Vec<f64>,
    probs: Vec<f64>,
    skeleton: Vec<f64>,
    record: TrajectoryRecord,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinementState {
    iteration: usize,
    logits: Volume,
    cached: Option<CachedBarcode>,
    previous: Option<PreviousIterate>,
    moments: Moments,
    trajectory: Vec<TrajectoryRecord>,
    last_report: Option<TibLossReport>,
}

impl RefinementState {
    /// Starts from a probability map; values are clamped away from 0 and 1.
    pub fn init(p0: &Volume) -> Result<Self> {
        p0.expect_role(Role::Probability)?;
        let logits: Vec<f64> = p0
            .data()
            .iter()
            .map(|p| logit_scalar(p.clamp(INIT_CLAMP, 1.0 - INIT_CLAMP)))
            .collect();
        let n = logits.len();
        Ok(Self {
            iteration: 0,
            logits: p0.with_data(Role::Logit, logits)?,
            cached: None,
            previous: None,
            moments: Moments {
                first: vec![0.0; n],
                second: vec![0.0; n],
                steps: 0,
            },
            trajectory: Vec::new(),
            last_report: None,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn logits(&self) -> &Volume {
        &self.logits
    }

    pub fn probabilities(&self) -> Volume {
        let data = self.logits.data().iter().map(|l| sigmoid_scalar(*l)).collect();
        self.logits
            .with_data(Role::Probability, data)
            .expect("sigmoid output is a probability")
    }

    pub fn cached_barcode(&self) -> Option<&CachedBarcode> {
        self.cached.as_ref()
    }

    pub fn trajectory(&self) -> &[TrajectoryRecord] {
        &self.trajectory
    }

    pub fn into_trajectory(self) -> Vec<TrajectoryRecord> {
        self.trajectory
    }

    pub fn last_report(&self) -> Option<&TibLossReport> {
        self.last_report.as_ref()
    }

    fn evaluate(&mut self, cfg: &RefineConfig, i: usize) -> Result<Evaluation> {
        let dims = self.logits.dims();
        let probs: Vec<f64> = self.logits.data().iter().map(|l| sigmoid_scalar(*l)).collect();
        let p_next = self.logits.with_data(Role::Probability, probs)?;

        let recompute = schedule_j(i, &cfg.curriculum) == i || self.cached.is_none();
        if recompute {
            let barcode = compute_ph0(&p_next, cfg.connectivity)?;
            let split = FeatureSplit::new(&barcode, cfg.prior, dims);
            self.cached = Some(CachedBarcode {
                barcode,
                split,
                iteration: i,
            });
        }
        let probs = p_next.into_data();
        let cached = self.cached.as_ref().expect("barcode cached above");
        let correction = correction_at(&cached.split, cfg.prior, &probs);

        let skeleton = skeleton_of_foreground(&probs, dims, cfg.skeleton);
        let (prev_probs, prev_skel) = match &self.previous {
            Some(prev) => (prev.probs.as_slice(), prev.skeleton.as_slice()),
            None => (probs.as_slice(), skeleton.as_slice()),
        };
        let structural = structural_from_skeletons(&probs, &skeleton, prev_probs, prev_skel);
        let integrity = integrity_from_parts(&probs, prev_probs, structural, cfg.weights);

        let phase_gamma = if cfg.curriculum.is_dense(i) {
            1.0
        } else {
            cfg.weights.gamma
        };
        let (report, grad_prob) = assemble(&correction, &integrity, phase_gamma, dims);
        for (term, value) in [
            ("l_cor", report.l_cor),
            ("l_com_voxel", report.l_com_voxel),
            ("l_com_struct", report.l_com_struct),
            ("l_total", report.l_total),
        ] {
            if !value.is_finite() {
                return Err(Error::Numerical { iteration: i, term });
            }
        }
        if grad_prob.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical {
                iteration: i,
                term: "gradient",
            });
        }

        let beta0 = count_components(dims, cfg.connectivity, |v| probs[v] > BETTI_THRESHOLD);
        let record = TrajectoryRecord {
            iteration: i,
            beta0,
            l_cor: report.l_cor,
            l_com_voxel: report.l_com_voxel,
            l_com_struct: report.l_com_struct,
            l_total: report.l_total,
            ph_recomputed: recompute,
        };
        Ok(Evaluation {
            report,
            grad_prob,
            probs,
            skeleton,
            record,
        })
    }

    /// One loss evaluation and optimizer update.
    pub fn step(&mut self, cfg: &RefineConfig) -> Result<()> {
        let i = self.iteration;
        if i >= cfg.curriculum.total {
            return Err(Error::InvalidParameter(format!(
                "iteration {i} is past the configured total {}",
                cfg.curriculum.total
            )));
        }
        let eval = self.evaluate(cfg, i)?;
        let grad_logit: Vec<f64> = eval
            .grad_prob
            .iter()
            .zip(&eval.probs)
            .map(|(g, p)| g * p * (1.0 - p))
            .collect();
        self.apply_update(&cfg.optimizer, &grad_logit, i)?;

        self.trajectory.push(eval.record);
        self.last_report = Some(eval.report);
        self.previous = Some(PreviousIterate {
            probs: eval.probs,
            skeleton: eval.skeleton,
        });
        self.iteration += 1;
        Ok(())
    }

    /// Evaluates the loss at the current iterate without updating it and logs
    /// the result.
    pub fn record_final(&mut self, cfg: &RefineConfig) -> Result<()> {
        let eval = self.evaluate(cfg, self.iteration)?;
        self.trajectory.push(eval.record);
        self.last_report = Some(eval.report);
        Ok(())
    }

    fn apply_update(&mut self, opt: &OptimizerConfig, grad: &[f64], i: usize) -> Result<()> {
        let logits = self.logits.values_mut();
        let lr = opt.learning_rate;
        match opt.method {
            OptimizerMethod::PlainGradient => {
                for (l, g) in logits.iter_mut().zip(grad) {
                    *l -= lr * g;
                }
            }
            OptimizerMethod::AdamW => {
                let m = &mut self.moments;
                m.steps += 1;
                let c1 = 1.0 - opt.beta1.powi(m.steps);
                let c2 = 1.0 - opt.beta2.powi(m.steps);
                for (k, l) in logits.iter_mut().enumerate() {
                    let g = grad[k];
                    m.first[k] = opt.beta1 * m.first[k] + (1.0 - opt.beta1) * g;
                    m.second[k] = opt.beta2 * m.second[k] + (1.0 - opt.beta2) * g * g;
                    let step = (m.first[k] / c1) / ((m.second[k] / c2).sqrt() + opt.epsilon);
                    *l -= lr * (step + opt.weight_decay * *l);
                }
            }
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::Numerical {
                iteration: i,
                term: "logits",
            });
        }
        Ok(())
    }
}

/// Result of a complete run.
#[derive(Clone, Debug)]
pub struct RefineOutcome {
    pub refined: Volume,
    pub trajectory: Vec<TrajectoryRecord>,
    pub final_barcode: Option<Barcode>,
}

/// A failed run; the trajectory up to the failure is kept for diagnosis.
#[derive(Debug, thiserror::Error)]
#[error("refinement failed: {error}")]
pub struct RunFailure {
    #[source]
    pub error: Error,
    pub trajectory: Vec<TrajectoryRecord>,
}

/// Runs `T` update iterations and logs one more evaluation at iteration `T`.
///
/// With `T = 0` the input is returned unchanged with an empty trajectory.
pub fn run(p0: &Volume, cfg: &RefineConfig) -> std::result::Result<RefineOutcome, RunFailure> {
    let fail = |error, trajectory| RunFailure { error, trajectory };
    cfg.validate().map_err(|e| fail(e, Vec::new()))?;
    p0.expect_role(Role::Probability).map_err(|e| fail(e, Vec::new()))?;
    if cfg.curriculum.total == 0 {
        return Ok(RefineOutcome {
            refined: p0.clone(),
            trajectory: Vec::new(),
            final_barcode: None,
        });
    }
    let mut state = RefinementState::init(p0).map_err(|e| fail(e, Vec::new()))?;
    while state.iteration() < cfg.curriculum.total {
        if let Err(e) = state.step(cfg) {
            return Err(fail(e, state.into_trajectory()));
        }
    }
    if let Err(e) = state.record_final(cfg) {
        return Err(fail(e, state.into_trajectory()));
    }
    let refined = state.probabilities();
    let final_barcode = state.cached.take().map(|c| c.barcode);
    Ok(RefineOutcome {
        refined,
        trajectory: state.into_trajectory(),
        final_barcode,
    })
}
