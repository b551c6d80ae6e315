//! Segmentation metrics for tubular trees: clDice, surface Dice, HD95,
//! tree-length and branch detection rates, and the component-count error.
//!
//! Masks are binary volumes. Distances are in millimetres, using the spacing
//! passed alongside the masks.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cubical_ph::count_components;
use crate::error::{Error, Result};
use crate::soft_skeleton::{soft_skel_values, SkeletonParams};
use crate::volume::{Connectivity, Dims, Role, Volume, VoxelCoord};

/// A branch counts as detected when strictly more than this fraction of its
/// centerline lies inside the prediction.
pub const BRANCH_DETECTION_FRACTION: f64 = 0.8;

/// Default surface-Dice tolerance in millimetres.
pub const DEFAULT_NSD_TOLERANCE_MM: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CenterlinePoint {
    #[serde(flatten)]
    pub voxel: VoxelCoord,
    pub branch: usize,
}

#[derive(Serialize, Deserialize)]
struct CenterlineRepr {
    points: Vec<CenterlinePoint>,
}

/// Labelled ground-truth centerline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CenterlineRepr", into = "CenterlineRepr")]
pub struct CenterlineTruth {
    points: Vec<CenterlinePoint>,
    branches: BTreeMap<usize, Vec<VoxelCoord>>,
}

impl TryFrom<CenterlineRepr> for CenterlineTruth {
    type Error = Error;

    fn try_from(repr: CenterlineRepr) -> Result<Self> {
        Self::new(repr.points)
    }
}

impl From<CenterlineTruth> for CenterlineRepr {
    fn from(c: CenterlineTruth) -> Self {
        CenterlineRepr { points: c.points }
    }
}

impl CenterlineTruth {
    /// Branch ids must be contiguous from 0; a voxel may appear only once.
    pub fn new(points: Vec<CenterlinePoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCenterline);
        }
        let mut branches: BTreeMap<usize, Vec<VoxelCoord>> = BTreeMap::new();
        for p in &points {
            branches.entry(p.branch).or_default().push(p.voxel);
        }
        if branches.keys().copied().ne(0..branches.len()) {
            return Err(Error::InvalidParameter(
                "centerline branch ids must be contiguous from 0".into(),
            ));
        }
        let mut seen: Vec<VoxelCoord> = points.iter().map(|p| p.voxel).collect();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidParameter(
                "centerline voxel listed twice".into(),
            ));
        }
        Ok(Self { points, branches })
    }

    pub fn points(&self) -> &[CenterlinePoint] {
        &self.points
    }

    pub fn branches(&self) -> &BTreeMap<usize, Vec<VoxelCoord>> {
        &self.branches
    }

    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks that every point lies inside `gt`.
    pub fn validate_against(&self, gt: &Volume) -> Result<()> {
        let dims = gt.dims();
        for p in &self.points {
            if !dims.contains(p.voxel) || gt.data()[dims.index_of(p.voxel)] == 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "centerline voxel ({}, {}, {}) is outside the ground truth",
                    p.voxel.x, p.voxel.y, p.voxel.z
                )));
            }
        }
        Ok(())
    }
}

/// Conditions under which a metric fell back to its conventional value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricFlag {
    EmptyPredSkeleton,
    EmptyGtSkeleton,
    EmptySurfaces,
    EmptyPred,
    EmptyGt,
}

impl fmt::Display for MetricFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricFlag::EmptyPredSkeleton => "empty-pred-skeleton",
            MetricFlag::EmptyGtSkeleton => "empty-gt-skeleton",
            MetricFlag::EmptySurfaces => "empty-surfaces",
            MetricFlag::EmptyPred => "empty-pred",
            MetricFlag::EmptyGt => "empty-gt",
        })
    }
}

/// A percentage with the flag raised when its denominator vanished.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scored {
    pub pct: f64,
    pub flag: Option<MetricFlag>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cldice_pct: f64,
    pub nsdice_pct: f64,
    /// NaN when either mask is empty (flagged).
    pub hd95_mm: f64,
    pub bd_pct: f64,
    pub td_pct: f64,
    pub betti0_error: usize,
    pub dice_pct: f64,
    pub flags: Vec<MetricFlag>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub nsd_tolerance_mm: f64,
    pub connectivity: Connectivity,
    pub skeleton: SkeletonParams,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            nsd_tolerance_mm: DEFAULT_NSD_TOLERANCE_MM,
            connectivity: Connectivity::TwentySix,
            skeleton: SkeletonParams::default(),
        }
    }
}

fn expect_masks(pred: &Volume, gt: &Volume) -> Result<()> {
    pred.expect_role(Role::Binary)?;
    gt.expect_role(Role::Binary)?;
    pred.ensure_same_dims(gt)
}

fn harmonic_pct(a: f64, b: f64) -> f64 {
    if a + b > 0.0 {
        200.0 * a * b / (a + b)
    } else {
        0.0
    }
}

pub fn betti0_error(pred: &Volume, gt: &Volume, conn: Connectivity) -> Result<usize> {
    expect_masks(pred, gt)?;
    let count = |v: &Volume| count_components(v.dims(), conn, |i| v.data()[i] != 0.0);
    Ok(count(pred).abs_diff(count(gt)))
}

pub fn dice(pred: &Volume, gt: &Volume) -> Result<Scored> {
    expect_masks(pred, gt)?;
    let (mut both, mut total) = (0usize, 0usize);
    for (p, g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (*p != 0.0, *g != 0.0);
        both += usize::from(p && g);
        total += usize::from(p) + usize::from(g);
    }
    Ok(if total == 0 {
        Scored {
            pct: 100.0,
            flag: Some(MetricFlag::EmptySurfaces),
        }
    } else {
        Scored {
            pct: 200.0 * both as f64 / total as f64,
            flag: None,
        }
    })
}

fn skeleton_support(mask: &Volume, params: SkeletonParams) -> Vec<bool> {
    soft_skel_values(mask.data(), mask.dims(), params)
        .into_iter()
        .map(|s| s > 0.0)
        .collect()
}

/// Centerline Dice in percent.
///
/// The ground-truth skeleton is the provided centerline when given, else the
/// support of the soft skeleton of `gt`.
pub fn cl_dice(
    pred: &Volume,
    gt: &Volume,
    gt_centerline: Option<&CenterlineTruth>,
    params: SkeletonParams,
) -> Result<Scored> {
    expect_masks(pred, gt)?;
    params.validate()?;
    let dims = pred.dims();
    let (p, g) = (pred.data(), gt.data());

    let pred_skel = skeleton_support(pred, params);
    let skel_p = pred_skel.iter().filter(|s| **s).count();
    let hit_p = (0..dims.len()).filter(|&i| pred_skel[i] && g[i] != 0.0).count();

    let (skel_g, hit_g) = match gt_centerline {
        Some(cl) => {
            cl.validate_against(gt)?;
            let hit = cl
                .points()
                .iter()
                .filter(|pt| p[dims.index_of(pt.voxel)] != 0.0)
                .count();
            (cl.len(), hit)
        }
        None => {
            let gt_skel = skeleton_support(gt, params);
            let n = gt_skel.iter().filter(|s| **s).count();
            let hit = (0..dims.len()).filter(|&i| gt_skel[i] && p[i] != 0.0).count();
            (n, hit)
        }
    };

    let flag = if skel_p == 0 {
        Some(MetricFlag::EmptyPredSkeleton)
    } else if skel_g == 0 {
        Some(MetricFlag::EmptyGtSkeleton)
    } else {
        None
    };
    if flag.is_some() {
        return Ok(Scored { pct: 0.0, flag });
    }
    let tprec = hit_p as f64 / skel_p as f64;
    let tsens = hit_g as f64 / skel_g as f64;
    Ok(Scored {
        pct: harmonic_pct(tprec, tsens),
        flag: None,
    })
}

/// Foreground voxels with at least one face neighbour in the background.
/// Voxels on the grid border count as surface.
pub fn surface(mask: &Volume) -> Vec<usize> {
    let dims = mask.dims();
    let m = mask.data();
    (0..dims.len())
        .filter(|&i| {
            if m[i] == 0.0 {
                return false;
            }
            let c = dims.coord(i);
            let on_border = c.x == 0
                || c.y == 0
                || c.z == 0
                || c.x + 1 == dims.nx
                || c.y + 1 == dims.ny
                || c.z + 1 == dims.nz;
            let mut open = on_border;
            dims.for_each_neighbor(i, Connectivity::Six, |n| open |= m[n] == 0.0);
            open
        })
        .collect()
}

// Lower envelope of parabolas (x - p·s)² + f[p] sampled at x = q·s.
fn envelope_1d(f: &[f64], s: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    let pos = |p: usize| p as f64 * s;
    for (q, &fq) in f.iter().enumerate() {
        if fq.is_infinite() {
            continue;
        }
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let meet = ((fq + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if meet <= *z.last().expect("z tracks v") {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(meet);
                break;
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let x = pos(q);
        while k + 1 < v.len() && z[k + 1] < x {
            k += 1;
        }
        let d = x - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance (mm²) from every voxel to the nearest
/// seed; infinite when there are no seeds.
pub fn squared_distance_transform(seeds: &[bool], dims: Dims, spacing: [f64; 3]) -> Vec<f64> {
    let mut dist: Vec<f64> = seeds
        .iter()
        .map(|s| if *s { 0.0 } else { f64::INFINITY })
        .collect();
    let extents = dims.as_array();
    let strides = [1, dims.nx, dims.nx * dims.ny];
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in 0..3 {
        let n = extents[axis];
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        for start in 0..dims.len() {
            if (start / strides[axis]) % n != 0 {
                continue;
            }
            for (k, l) in line.iter_mut().enumerate() {
                *l = dist[start + k * strides[axis]];
            }
            envelope_1d(&line, spacing[axis], &mut out, &mut v, &mut z);
            for (k, o) in out.iter().enumerate() {
                dist[start + k * strides[axis]] = *o;
            }
        }
    }
    dist
}

/// Distance (mm) from each surface voxel of `from` to the nearest surface
/// voxel of `to`, in the order of [`surface`].
fn surface_distances(from: &Volume, to: &Volume, spacing: [f64; 3]) -> Vec<f64> {
    let dims = to.dims();
    let mut seeds = vec![false; dims.len()];
    for i in surface(to) {
        seeds[i] = true;
    }
    let dt = squared_distance_transform(&seeds, dims, spacing);
    surface(from).into_iter().map(|i| dt[i].sqrt()).collect()
}

/// Surface voxels of `from` lying within `tolerance_mm` of the surface of `to`.
pub fn surface_within(from: &Volume, to: &Volume, tolerance_mm: f64, spacing: [f64; 3]) -> Result<Vec<usize>> {
    expect_masks(from, to)?;
    Ok(surface(from)
        .into_iter()
        .zip(surface_distances(from, to, spacing))
        .filter(|(_, d)| *d <= tolerance_mm)
        .map(|(i, _)| i)
        .collect())
}

/// Normalized surface Dice in percent at tolerance `tolerance_mm`.
pub fn nsdice(pred: &Volume, gt: &Volume, tolerance_mm: f64, spacing: [f64; 3]) -> Result<Scored> {
    expect_masks(pred, gt)?;
    if !(tolerance_mm >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "surface tolerance {tolerance_mm} must be non-negative"
        )));
    }
    let pred_to_gt = surface_distances(pred, gt, spacing);
    let gt_to_pred = surface_distances(gt, pred, spacing);
    let total = pred_to_gt.len() + gt_to_pred.len();
    if pred_to_gt.is_empty() || gt_to_pred.is_empty() {
        let both_empty = total == 0;
        return Ok(Scored {
            pct: if both_empty { 100.0 } else { 0.0 },
            flag: Some(MetricFlag::EmptySurfaces),
        });
    }
    let within = pred_to_gt
        .iter()
        .chain(&gt_to_pred)
        .filter(|d| **d <= tolerance_mm)
        .count();
    Ok(Scored {
        pct: 100.0 * within as f64 / total as f64,
        flag: None,
    })
}

/// Linear-interpolation percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// 95th percentile of the pooled symmetric surface distances, in mm.
pub fn hd95(pred: &Volume, gt: &Volume, spacing: [f64; 3]) -> Result<f64> {
    expect_masks(pred, gt)?;
    if pred.count_nonzero() == 0 {
        return Err(Error::EmptyMask("prediction"));
    }
    if gt.count_nonzero() == 0 {
        return Err(Error::EmptyMask("ground-truth"));
    }
    let mut d = surface_distances(pred, gt, spacing);
    d.extend(surface_distances(gt, pred, spacing));
    d.sort_by(f64::total_cmp);
    Ok(percentile_sorted(&d, 0.95))
}

/// Tree-length and branch detection rates in percent, `(td, bd)`.
pub fn tree_branch_detected(pred: &Volume, cl: &CenterlineTruth) -> Result<(f64, f64)> {
    pred.expect_role(Role::Binary)?;
    if cl.is_empty() {
        return Err(Error::EmptyCenterline);
    }
    let dims = pred.dims();
    let p = pred.data();
    let inside = |v: &VoxelCoord| dims.contains(*v) && p[dims.index_of(*v)] != 0.0;
    let mut covered = 0usize;
    let mut detected = 0usize;
    for voxels in cl.branches().values() {
        let hit = voxels.iter().filter(|v| inside(v)).count();
        covered += hit;
        if hit as f64 > BRANCH_DETECTION_FRACTION * voxels.len() as f64 {
            detected += 1;
        }
    }
    let td = 100.0 * covered as f64 / cl.len() as f64;
    let bd = 100.0 * detected as f64 / cl.branch_count() as f64;
    Ok((td, bd))
}

/// All metrics for one case. TD and BD need a centerline and are reported
/// as NaN without one.
pub fn evaluate(
    pred: &Volume,
    gt: &Volume,
    centerline: Option<&CenterlineTruth>,
    cfg: &MetricConfig,
) -> Result<MetricReport> {
    expect_masks(pred, gt)?;
    let spacing = gt.spacing();
    let mut flags = Vec::new();
    let mut note = |s: Scored| {
        if let Some(f) = s.flag {
            flags.push(f);
        }
        s.pct
    };
    let cldice_pct = note(cl_dice(pred, gt, centerline, cfg.skeleton)?);
    let nsdice_pct = note(nsdice(pred, gt, cfg.nsd_tolerance_mm, spacing)?);
    let dice_pct = note(dice(pred, gt)?);
    let hd95_mm = match hd95(pred, gt, spacing) {
        Ok(h) => h,
        Err(Error::EmptyMask(side)) => {
            flags.push(if side == "prediction" {
                MetricFlag::EmptyPred
            } else {
                MetricFlag::EmptyGt
            });
            f64::NAN
        }
        Err(e) => return Err(e),
    };
    let (td_pct, bd_pct) = match centerline {
        Some(cl) => tree_branch_detected(pred, cl)?,
        None => (f64::NAN, f64::NAN),
    };
    flags.sort_unstable();
    flags.dedup();
    Ok(MetricReport {
        cldice_pct,
        nsdice_pct,
        hd95_mm,
        bd_pct,
        td_pct,
        betti0_error: betti0_error(pred, gt, cfg.connectivity)?,
        dice_pct,
        flags,
    })
}
