//! Topological Integrity Betti loss: a persistence-based correction term that
//! steers the component count toward a prior, plus an integrity term that
//! keeps consecutive iterates close voxel-wise and skeleton-wise.
//!
//! All gradients here are with respect to probabilities of the current
//! iterate. Quantities derived from the previous iterate are constants, and
//! the thresholded skeleton mask is treated as constant.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cubical_ph::{Barcode, PersistencePair};
use crate::error::{Error, Result};
use crate::soft_skeleton::{soft_skel_values, SkeletonParams};
use crate::volume::{Dims, Role, Volume, VoxelCoord};

/// Below this skeleton mass precision/sensitivity are undefined.
pub const SKELETON_EPS: f64 = 1e-8;

/// Expected number of connected components; each ideally has persistence 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopoPrior {
    beta0: usize,
}

impl TopoPrior {
    pub fn new(beta0: usize) -> Result<Self> {
        if beta0 == 0 {
            return Err(Error::InvalidParameter("prior beta0 must be at least 1".into()));
        }
        Ok(Self { beta0 })
    }

    pub fn beta0(&self) -> usize {
        self.beta0
    }

    /// Total persistence of the ideal diagram.
    pub fn ideal_persistence(&self) -> f64 {
        self.beta0 as f64
    }
}

impl Default for TopoPrior {
    fn default() -> Self {
        Self { beta0: 1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TibWeights {
    /// Voxel-wise integrity weight.
    pub alpha: f64,
    /// Skeleton-wise integrity weight.
    pub beta: f64,
    /// Integrity down-weight in the sparse (late) phase.
    pub gamma: f64,
}

impl Default for TibWeights {
    fn default() -> Self {
        Self {
            alpha: 1e4,
            beta: 1e3,
            gamma: 0.1,
        }
    }
}

impl TibWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!("alpha {} must be >= 0", self.alpha)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidParameter(format!("beta {} must be >= 0", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidParameter(format!("gamma {} must lie in [0, 1]", self.gamma)));
        }
        Ok(())
    }
}

/// Splits a sorted barcode into the `prior.beta0` most persistent (faithful)
/// features and the rest (superfluous).
pub fn split_features(b: &Barcode, prior: TopoPrior) -> (&[PersistencePair], &[PersistencePair]) {
    b.pairs().split_at(prior.beta0.min(b.len()))
}

/// Critical voxels of one feature, by linear index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriticalCells {
    pub birth: usize,
    pub death: Option<usize>,
}

impl CriticalCells {
    pub fn of(pair: &PersistencePair, dims: Dims) -> Self {
        Self {
            birth: dims.index_of(pair.birth_voxel),
            death: pair.death_voxel.map(|v| dims.index_of(v)),
        }
    }

    fn persistence(&self, values: &[f64]) -> f64 {
        let death = self.death.map_or(0.0, |d| values[d]);
        values[self.birth] - death
    }
}

/// Critical cells of a barcode, already split into faithful and superfluous.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureSplit {
    pub faithful: Vec<CriticalCells>,
    pub superfluous: Vec<CriticalCells>,
}

impl FeatureSplit {
    pub fn new(b: &Barcode, prior: TopoPrior, dims: Dims) -> Self {
        let (faithful, superfluous) = split_features(b, prior);
        Self {
            faithful: faithful.iter().map(|p| CriticalCells::of(p, dims)).collect(),
            superfluous: superfluous.iter().map(|p| CriticalCells::of(p, dims)).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.faithful.is_empty() && self.superfluous.is_empty()
    }
}

/// Value and subgradients of the correction term.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrectionTerm {
    pub loss: f64,
    pub topo_f: f64,
    pub topo_s: f64,
    /// d loss / d probability at each critical voxel, by linear index.
    pub grads: BTreeMap<usize, f64>,
    /// No features at all: the loss is the bare prior and has no gradient.
    pub vacuous: bool,
}

fn accumulate(
    features: impl Iterator<Item = (f64, CriticalCells, bool)>,
    prior: TopoPrior,
    vacuous: bool,
) -> CorrectionTerm {
    let mut grads = BTreeMap::new();
    let mut topo_f = 0.0;
    let mut topo_s = 0.0;
    for (persistence, cell, faithful) in features {
        if persistence <= 0.0 {
            continue;
        }
        // Faithful features are pushed to persist, superfluous ones to vanish.
        let sign = if faithful {
            topo_f += persistence;
            -1.0
        } else {
            topo_s += persistence;
            1.0
        };
        *grads.entry(cell.birth).or_insert(0.0) += sign;
        if let Some(d) = cell.death {
            *grads.entry(d).or_insert(0.0) -= sign;
        }
    }
    CorrectionTerm {
        loss: prior.ideal_persistence() - topo_f + topo_s,
        topo_f,
        topo_s,
        grads,
        vacuous,
    }
}

/// Correction term evaluated at the critical cells of `split`, reading birth
/// and death values from `values`.
///
/// Features whose death value has caught up with their birth value contribute
/// neither persistence nor gradient. On a freshly computed barcode this never
/// happens; it matters when cells are reused across iterations.
pub fn correction_at(split: &FeatureSplit, prior: TopoPrior, values: &[f64]) -> CorrectionTerm {
    let faithful = split.faithful.iter().map(|c| (c.persistence(values), *c, true));
    let superfluous = split.superfluous.iter().map(|c| (c.persistence(values), *c, false));
    accumulate(faithful.chain(superfluous), prior, split.is_empty())
}

/// Correction term of a freshly computed barcode of a volume with geometry `dims`.
pub fn l_tib_cor(b: &Barcode, prior: TopoPrior, dims: Dims) -> CorrectionTerm {
    let (faithful, superfluous) = split_features(b, prior);
    let tag = |flag: bool| move |p: &PersistencePair| (p.persistence(), CriticalCells::of(p, dims), flag);
    let features = faithful.iter().map(tag(true)).chain(superfluous.iter().map(tag(false)));
    accumulate(features, prior, b.is_empty())
}

/// Skeleton mask of `{p > 0.5}`.
pub fn skeleton_of_foreground(p: &[f64], dims: Dims, params: SkeletonParams) -> Vec<f64> {
    let fg: Vec<f64> = p.iter().map(|v| if *v > 0.5 { 1.0 } else { 0.0 }).collect();
    soft_skel_values(&fg, dims, params)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StructuralTerm {
    pub f_score: f64,
    pub precision: f64,
    pub sensitivity: f64,
    /// d f_score / d p_next.
    pub grad: Vec<f64>,
    pub degenerate: bool,
}

/// Skeleton-weighted precision/sensitivity F-score between consecutive
/// iterates, given their skeleton masks.
pub fn structural_from_skeletons(
    p_next: &[f64],
    skel_next: &[f64],
    p_prev: &[f64],
    skel_prev: &[f64],
) -> StructuralTerm {
    let n = p_next.len();
    let mut mass_next = 0.0; // Σ S_next p_next
    let mut overlap_next = 0.0; // Σ S_next p_next p_prev
    let mut mass_prev = 0.0; // Σ S_prev p_prev
    let mut overlap_prev = 0.0; // Σ S_prev p_prev p_next
    for i in 0..n {
        let sp_next = skel_next[i] * p_next[i];
        let sp_prev = skel_prev[i] * p_prev[i];
        mass_next += sp_next;
        overlap_next += sp_next * p_prev[i];
        mass_prev += sp_prev;
        overlap_prev += sp_prev * p_next[i];
    }
    if mass_next < SKELETON_EPS || mass_prev < SKELETON_EPS {
        return StructuralTerm {
            f_score: 0.0,
            precision: 0.0,
            sensitivity: 0.0,
            grad: vec![0.0; n],
            degenerate: true,
        };
    }
    let precision = overlap_next / mass_next;
    let sensitivity = overlap_prev / mass_prev;
    let sum = precision + sensitivity;
    if sum <= 0.0 {
        return StructuralTerm {
            f_score: 0.0,
            precision,
            sensitivity,
            grad: vec![0.0; n],
            degenerate: false,
        };
    }
    let f_score = 2.0 * precision * sensitivity / sum;
    let df_dprec = 2.0 * sensitivity * sensitivity / (sum * sum);
    let df_dsens = 2.0 * precision * precision / (sum * sum);
    let grad = (0..n)
        .map(|i| {
            let dprec = skel_next[i] * (p_prev[i] - precision) / mass_next;
            let dsens = skel_prev[i] * p_prev[i] / mass_prev;
            df_dprec * dprec + df_dsens * dsens
        })
        .collect();
    StructuralTerm {
        f_score,
        precision,
        sensitivity,
        grad,
        degenerate: false,
    }
}

fn expect_pair(p_next: &Volume, p_prev: &Volume) -> Result<()> {
    p_next.expect_role(Role::Probability)?;
    p_prev.expect_role(Role::Probability)?;
    p_next.ensure_same_dims(p_prev)
}

pub fn struc_similarity(
    p_next: &Volume,
    p_prev: &Volume,
    params: SkeletonParams,
) -> Result<StructuralTerm> {
    expect_pair(p_next, p_prev)?;
    params.validate()?;
    let dims = p_next.dims();
    let skel_next = skeleton_of_foreground(p_next.data(), dims, params);
    let skel_prev = skeleton_of_foreground(p_prev.data(), dims, params);
    Ok(structural_from_skeletons(
        p_next.data(),
        &skel_next,
        p_prev.data(),
        &skel_prev,
    ))
}

/// Integrity term: `alpha * mean((p_next - p_prev)^2) - beta * f_score`.
#[derive(Clone, Debug, PartialEq)]
pub struct IntegrityTerm {
    /// `alpha * mean squared difference`.
    pub voxel: f64,
    /// `-beta * f_score`.
    pub structural: f64,
    pub f_score: f64,
    pub grad: Vec<f64>,
    pub degenerate: bool,
}

impl IntegrityTerm {
    pub fn value(&self) -> f64 {
        self.voxel + self.structural
    }
}

pub(crate) fn integrity_from_parts(
    p_next: &[f64],
    p_prev: &[f64],
    structural: StructuralTerm,
    weights: TibWeights,
) -> IntegrityTerm {
    let n = p_next.len() as f64;
    let mut sq = 0.0;
    let mut grad = structural.grad;
    for i in 0..p_next.len() {
        let diff = p_next[i] - p_prev[i];
        sq += diff * diff;
        grad[i] = weights.alpha * 2.0 / n * diff - weights.beta * grad[i];
    }
    IntegrityTerm {
        voxel: weights.alpha * sq / n,
        structural: -weights.beta * structural.f_score,
        f_score: structural.f_score,
        grad,
        degenerate: structural.degenerate,
    }
}

pub fn l_tib_com(
    p_next: &Volume,
    p_prev: &Volume,
    weights: TibWeights,
    params: SkeletonParams,
) -> Result<IntegrityTerm> {
    weights.validate()?;
    let structural = struc_similarity(p_next, p_prev, params)?;
    Ok(integrity_from_parts(
        p_next.data(),
        p_prev.data(),
        structural,
        weights,
    ))
}

/// Full loss decomposition for one iterate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TibLossReport {
    pub l_cor: f64,
    pub l_com_voxel: f64,
    pub l_com_struct: f64,
    pub l_total: f64,
    pub topo_f: f64,
    pub topo_s: f64,
    pub f_score: f64,
    pub phase_gamma: f64,
    pub critical_grads: BTreeMap<VoxelCoord, f64>,
    pub vacuous_barcode: bool,
    pub degenerate_skeleton: bool,
}

impl TibLossReport {
    pub fn l_com(&self) -> f64 {
        self.l_com_voxel + self.l_com_struct
    }
}

/// Combines both terms; returns the report and d l_total / d p_next.
pub fn assemble(
    correction: &CorrectionTerm,
    integrity: &IntegrityTerm,
    phase_gamma: f64,
    dims: Dims,
) -> (TibLossReport, Vec<f64>) {
    let mut grad: Vec<f64> = integrity.grad.iter().map(|g| phase_gamma * g).collect();
    for (&i, &g) in &correction.grads {
        grad[i] += g;
    }
    let report = TibLossReport {
        l_cor: correction.loss,
        l_com_voxel: integrity.voxel,
        l_com_struct: integrity.structural,
        l_total: correction.loss + phase_gamma * integrity.value(),
        topo_f: correction.topo_f,
        topo_s: correction.topo_s,
        f_score: integrity.f_score,
        phase_gamma,
        critical_grads: correction
            .grads
            .iter()
            .map(|(&i, &g)| (dims.coord(i), g))
            .collect(),
        vacuous_barcode: correction.vacuous,
        degenerate_skeleton: integrity.degenerate,
    };
    (report, grad)
}

/// `l_cor + phase_gamma * l_com`, with the gradient w.r.t. `p_next`.
#[allow(clippy::too_many_arguments)]
pub fn l_tib_total(
    barcode: &Barcode,
    prior: TopoPrior,
    p_next: &Volume,
    p_prev: &Volume,
    weights: TibWeights,
    params: SkeletonParams,
    phase_gamma: f64,
) -> Result<(TibLossReport, Vec<f64>)> {
    if !(0.0..=1.0).contains(&phase_gamma) {
        return Err(Error::InvalidParameter(format!(
            "phase gamma {phase_gamma} must lie in [0, 1]"
        )));
    }
    let correction = l_tib_cor(barcode, prior, p_next.dims());
    let integrity = l_tib_com(p_next, p_prev, weights, params)?;
    Ok(assemble(&correction, &integrity, phase_gamma, p_next.dims()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cubical_ph::compute_ph0;
    use crate::soft_skeleton::Pooling;
    use crate::volume::Connectivity;

    const ISO: [f64; 3] = [1.0, 1.0, 1.0];

    fn pair(birth: f64, death: f64, z: usize) -> PersistencePair {
        PersistencePair {
            birth,
            death,
            birth_voxel: VoxelCoord::new(0, 0, z),
            death_voxel: if death > 0.0 { Some(VoxelCoord::new(1, 0, z)) } else { None },
            essential: death == 0.0,
        }
    }

    fn persistences(pairs: &[PersistencePair]) -> Vec<f64> {
        pairs.iter().map(|p| p.persistence()).collect()
    }

    #[test]
    fn split_examples() {
        let b = Barcode::from_pairs(vec![pair(0.9, 0.0, 0), pair(0.8, 0.2, 1), pair(0.3, 0.1, 2)]);
        let (f, s) = split_features(&b, TopoPrior::new(1).unwrap());
        assert_eq!(persistences(f), vec![0.9]);
        assert_eq!(s.len(), 2);
        assert!((s[0].persistence() - 0.6).abs() < 1e-15);
        assert!((s[1].persistence() - 0.2).abs() < 1e-15);

        let single = Barcode::from_pairs(vec![pair(0.7, 0.0, 0)]);
        let (f, s) = split_features(&single, TopoPrior::new(1).unwrap());
        assert_eq!((f.len(), s.len()), (1, 0));

        let b = Barcode::from_pairs(vec![pair(0.8, 0.0, 0), pair(0.9, 0.2, 1), pair(0.4, 0.3, 2)]);
        let (f, s) = split_features(&b, TopoPrior::new(2).unwrap());
        assert_eq!(f.len(), 2);
        assert!((f[0].persistence() - 0.8).abs() < 1e-15);
        assert!((f[1].persistence() - 0.7).abs() < 1e-15);
        assert_eq!(s.len(), 1);

        let empty = Barcode::default();
        let (f, s) = split_features(&empty, TopoPrior::default());
        assert!(f.is_empty() && s.is_empty());
    }

    #[test]
    fn correction_on_four_voxel_line() {
        let v = Volume::new(Dims::new(1, 1, 4), ISO, Role::Probability, vec![0.9, 0.2, 0.8, 0.1]).unwrap();
        let b = compute_ph0(&v, Connectivity::TwentySix).unwrap();
        let c = l_tib_cor(&b, TopoPrior::default(), v.dims());
        assert!((c.loss - 0.7).abs() < 1e-12);
        assert_eq!(c.grads.len(), 3);
        assert_eq!(c.grads[&0], -1.0);
        assert_eq!(c.grads[&2], 1.0);
        assert_eq!(c.grads[&1], -1.0);
        assert!(!c.vacuous);
    }

    #[test]
    fn correction_ideal_and_vacuous() {
        let ideal = Barcode::from_pairs(vec![pair(1.0, 0.0, 3)]);
        let c = l_tib_cor(&ideal, TopoPrior::default(), Dims::new(2, 1, 4));
        assert_eq!(c.loss, 0.0);
        assert_eq!(c.grads.len(), 1);
        assert_eq!(c.grads[&Dims::new(2, 1, 4).index(0, 0, 3)], -1.0);

        let c = l_tib_cor(&Barcode::default(), TopoPrior::default(), Dims::cube(2));
        assert_eq!(c.loss, 1.0);
        assert!(c.grads.is_empty());
        assert!(c.vacuous);
    }

    #[test]
    fn coinciding_critical_voxels_sum() {
        // Voxel 2 (0.5) is the birth of one superfluous feature and the death
        // of another: +1 and -1 cancel.
        let v = Volume::new(
            Dims::new(1, 1, 5),
            ISO,
            Role::Probability,
            vec![0.9, 0.3, 0.5, 0.0, 0.0],
        )
        .unwrap();
        let mut data = v.data().to_vec();
        data[3] = 0.4;
        data[4] = 0.45;
        let v = v.with_data(Role::Probability, data).unwrap();
        let b = compute_ph0(&v, Connectivity::Six).unwrap();
        let c = l_tib_cor(&b, TopoPrior::default(), v.dims());
        // features: essential 0.9; (0.5 dies at 0.3); (0.45 dies at 0.4)
        assert!((c.loss - (1.0 - 0.9 + 0.2 + 0.05)).abs() < 1e-12);
        assert_eq!(c.grads[&2], 1.0);
        assert_eq!(c.grads[&1], -1.0);
        assert_eq!(c.grads[&4], 1.0);
        assert_eq!(c.grads[&3], -1.0);
    }

    #[test]
    fn reused_cells_track_current_values_and_saturate() {
        let dims = Dims::new(1, 1, 4);
        let values = [0.9, 0.2, 0.8, 0.1];
        let v = Volume::new(dims, ISO, Role::Probability, values.to_vec()).unwrap();
        let split = FeatureSplit::new(&compute_ph0(&v, Connectivity::Six).unwrap(), TopoPrior::default(), dims);
        let fresh = correction_at(&split, TopoPrior::default(), &values);
        assert!((fresh.loss - 0.7).abs() < 1e-12);

        let moved = [0.95, 0.4, 0.6, 0.1];
        let c = correction_at(&split, TopoPrior::default(), &moved);
        assert!((c.loss - (1.0 - 0.95 + 0.2)).abs() < 1e-12);

        let crossed = [0.95, 0.7, 0.6, 0.1];
        let c = correction_at(&split, TopoPrior::default(), &crossed);
        assert!((c.loss - 0.05).abs() < 1e-12);
        assert_eq!(c.grads.len(), 1);
    }

    fn tube_volume(scale: f64) -> Volume {
        let dims = Dims::new(16, 9, 9);
        Volume::from_fn(dims, ISO, Role::Probability, |c| {
            let dy = c.y as f64 - 4.0;
            let dz = c.z as f64 - 4.0;
            if dy * dy + dz * dz < 4.0 && (2..14).contains(&c.x) {
                scale
            } else {
                0.0
            }
        })
        .unwrap()
    }

    fn params() -> SkeletonParams {
        SkeletonParams::new(3, Pooling::Separable3).unwrap()
    }

    #[test]
    fn structural_identical_binary_maps() {
        let t = tube_volume(1.0);
        let s = struc_similarity(&t, &t, params()).unwrap();
        assert_eq!((s.precision, s.sensitivity, s.f_score), (1.0, 1.0, 1.0));
        assert!(!s.degenerate);
    }

    #[test]
    fn structural_degenerate_previous() {
        let t = tube_volume(1.0);
        let empty = Volume::filled(t.dims(), ISO, Role::Probability, 0.01).unwrap();
        let s = struc_similarity(&t, &empty, params()).unwrap();
        assert!(s.degenerate);
        assert_eq!(s.f_score, 0.0);
        assert!(s.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn structural_scaled_tube() {
        let s = struc_similarity(&tube_volume(0.8), &tube_volume(1.0), params()).unwrap();
        assert!((s.precision - 1.0).abs() < 1e-12);
        assert!((s.sensitivity - 0.8).abs() < 1e-12);
        assert!((s.f_score - 1.6 / 1.8).abs() < 1e-12);
    }

    #[test]
    fn integrity_examples() {
        let t = tube_volume(1.0);
        let w = TibWeights::default();
        let c = l_tib_com(&t, &t, w, params()).unwrap();
        assert_eq!(c.value(), -1000.0);

        let w0 = TibWeights { beta: 0.0, ..w };
        let c = l_tib_com(&tube_volume(0.7), &tube_volume(0.7), w0, params()).unwrap();
        assert_eq!(c.value(), 0.0);
        assert!(c.grad.iter().all(|g| *g == 0.0));

        let one = |v: f64| Volume::new(Dims::new(1, 1, 1), ISO, Role::Probability, vec![v]).unwrap();
        let w1 = TibWeights { alpha: 1.0, beta: 0.0, gamma: 0.1 };
        let c = l_tib_com(&one(0.6), &one(0.4), w1, params()).unwrap();
        assert!((c.value() - 0.04).abs() < 1e-15);
        assert!((c.grad[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn total_composition() {
        let t = tube_volume(1.0);
        let mut data = vec![0.0; t.len()];
        data[t.dims().index(7, 4, 4)] = 1.0;
        let peak = t.with_data(Role::Probability, data).unwrap();
        let ideal = compute_ph0(&peak, Connectivity::TwentySix).unwrap();
        for gamma in [1.0, 0.1] {
            let (r, _) = l_tib_total(&ideal, TopoPrior::default(), &t, &t, TibWeights::default(), params(), gamma).unwrap();
            assert_eq!(r.l_cor, 0.0);
            assert_eq!(r.l_total, gamma * -1000.0);
        }

        let correction = CorrectionTerm { loss: 0.7, topo_f: 0.9, topo_s: 0.6, grads: BTreeMap::new(), vacuous: false };
        let integrity = IntegrityTerm { voxel: 0.04, structural: -1000.0, f_score: 1.0, grad: vec![0.0], degenerate: false };
        let (dense, _) = assemble(&correction, &integrity, 1.0, Dims::new(1, 1, 1));
        assert!((dense.l_total - -999.26).abs() < 1e-9);
        let (late, _) = assemble(&correction, &integrity, 0.1, Dims::new(1, 1, 1));
        assert!((late.l_total - -99.296).abs() < 1e-9);
    }

    #[test]
    fn rejects_mismatched_dims() {
        let a = tube_volume(1.0);
        let b = Volume::filled(Dims::cube(3), ISO, Role::Probability, 0.5).unwrap();
        assert!(matches!(struc_similarity(&a, &b, params()), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn structural_gradient_matches_finite_differences() {
        // Values kept away from 0.5 so the skeleton mask is unchanged by the probe.
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next_unit = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let base = tube_volume(1.0);
        let mut jitter = |v: f64| if v > 0.5 { 0.6 + 0.39 * next_unit() } else { 0.4 * next_unit() };
        let p_next: Vec<f64> = base.data().iter().map(|v| jitter(*v)).collect();
        let p_prev: Vec<f64> = base.data().iter().map(|v| jitter(*v)).collect();
        let dims = base.dims();
        let skel_next = skeleton_of_foreground(&p_next, dims, params());
        let skel_prev = skeleton_of_foreground(&p_prev, dims, params());
        let s = structural_from_skeletons(&p_next, &skel_next, &p_prev, &skel_prev);
        let eps = 1e-6;
        for i in (0..p_next.len()).step_by(7) {
            let mut plus = p_next.clone();
            plus[i] += eps;
            let mut minus = p_next.clone();
            minus[i] -= eps;
            let fp = structural_from_skeletons(&plus, &skel_next, &p_prev, &skel_prev).f_score;
            let fm = structural_from_skeletons(&minus, &skel_next, &p_prev, &skel_prev).f_score;
            let fd = (fp - fm) / (2.0 * eps);
            assert!((fd - s.grad[i]).abs() <= 1e-7 * (1.0 + s.grad[i].abs()), "voxel {i}: fd {fd} vs {}", s.grad[i]);
        }
    }
}
