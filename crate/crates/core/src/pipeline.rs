//! Phantom → refinement → metrics, one case per seed.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::{evaluate, MetricConfig, MetricReport};
use crate::phantom::{generate, PhantomCase, PhantomConfig, PhantomRng};
use crate::refine::{run, RefineConfig, RunFailure, TrajectoryRecord};
use crate::volume::{binarize, Volume};

/// The evaluation phantom for `seed`: 96³, three generations, 4–6 breaks and
/// 3–5 blobs, with the counts drawn from the seed.
pub fn suite_phantom(seed: u64) -> PhantomConfig {
    let mut rng = PhantomRng::new(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x5EED);
    PhantomConfig {
        seed,
        breaks: 4 + rng.below(3),
        blobs: 3 + rng.below(3),
        ..PhantomConfig::default()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub phantom_s: f64,
    pub refine_s: f64,
    pub metrics_s: f64,
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub seed: u64,
    pub phantom: PhantomCase,
    pub initial: MetricReport,
    pub refined: MetricReport,
    pub refined_prob: Volume,
    pub trajectory: Vec<TrajectoryRecord>,
    pub timings: StageTimings,
}

/// Metrics of a probability map binarized at 0.5 against the phantom truth.
pub fn score(prob: &Volume, case: &PhantomCase, metrics: &MetricConfig) -> Result<MetricReport> {
    let pred = binarize(prob, 0.5)?;
    evaluate(&pred, &case.gt_mask, Some(&case.centerline), metrics)
}

pub fn run_case(
    phantom: &PhantomConfig,
    refine: &RefineConfig,
    metrics: &MetricConfig,
) -> std::result::Result<CaseResult, RunFailure> {
    let bare = |error| RunFailure {
        error,
        trajectory: Vec::new(),
    };
    let t0 = Instant::now();
    let case = generate(phantom).map_err(bare)?;
    let t1 = Instant::now();
    let outcome = run(&case.init_prob, refine)?;
    let t2 = Instant::now();
    let initial = score(&case.init_prob, &case, metrics).map_err(bare)?;
    let refined = score(&outcome.refined, &case, metrics).map_err(bare)?;
    let t3 = Instant::now();
    Ok(CaseResult {
        seed: phantom.seed,
        phantom: case,
        initial,
        refined,
        refined_prob: outcome.refined,
        trajectory: outcome.trajectory,
        timings: StageTimings {
            phantom_s: (t1 - t0).as_secs_f64(),
            refine_s: (t2 - t1).as_secs_f64(),
            metrics_s: (t3 - t2).as_secs_f64(),
        },
    })
}
