//! Synthetic tubular trees and their corrupted probability maps.
//!
//! A case is a bifurcating tree of straight capsules (the ground truth), its
//! labelled centerline, and an "initial prediction" in which spheres around
//! centerline points are erased and detached ellipsoidal blobs are added.
//! Everything is a pure function of the config and its seed.

use rand_core::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::cubical_ph::count_components;
use crate::error::{Error, Result};
use crate::metrics::{squared_distance_transform, CenterlinePoint, CenterlineTruth};
use crate::volume::{Connectivity, Dims, Role, Volume, VoxelCoord};

/// Portable seeded generator (SplitMix64).
#[derive(Clone, Debug)]
pub struct PhantomRng(SplitMix64);

impl PhantomRng {
    pub fn new(seed: u64) -> Self {
        Self(SplitMix64::seed_from_u64(seed))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range(&mut self, r: Range) -> f64 {
        r.min + (r.max - r.min) * self.uniform()
    }

    /// Uniform index below `n` (`n > 0`).
    pub fn below(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }
}

/// Closed interval `[min, max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite() && self.min <= self.max) {
            return Err(Error::InvalidParameter(format!(
                "{name} range [{}, {}] is empty or not finite",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub dims: Dims,
    pub spacing: [f64; 3],
    pub seed: u64,
    pub generations: usize,
    /// Root tube radius in voxels.
    pub root_radius: f64,
    /// Radius factor per generation, in (0, 1).
    pub radius_decay: f64,
    pub branch_length: Range,
    /// Angle between a child and its parent's direction, in degrees.
    pub branch_angle_deg: Range,
    pub breaks: usize,
    /// Added to the local tube radius to get each break sphere's radius.
    pub break_margin: Range,
    pub blobs: usize,
    /// Semi-axis range of blob ellipsoids, in voxels.
    pub blob_radius: Range,
    /// Minimum background gap between a blob and the tree or other blobs.
    pub blob_clearance: f64,
    /// When set, blob centres lie within this band beyond the clearance
    /// shell of the existing structure instead of anywhere in the grid.
    pub blob_reach: Option<f64>,
    pub noise: f64,
    pub foreground: f64,
    pub background: f64,
    pub max_attempts: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: Dims::cube(96),
            spacing: [1.0; 3],
            seed: 0,
            generations: 3,
            root_radius: 5.0,
            radius_decay: 0.7,
            branch_length: Range::new(20.0, 30.0),
            branch_angle_deg: Range::new(25.0, 45.0),
            breaks: 5,
            break_margin: Range::new(0.3, 0.8),
            blobs: 4,
            blob_radius: Range::new(1.5, 2.0),
            blob_clearance: 2.0,
            blob_reach: Some(2.0),
            noise: 0.01,
            foreground: 0.9,
            background: 0.1,
            max_attempts: 64,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.dims.is_empty() {
            return Err(Error::InvalidDims(self.dims.as_array()));
        }
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidSpacing(self.spacing));
        }
        if self.generations == 0 {
            return bad("generations must be at least 1".into());
        }
        if !(self.root_radius >= 1.0 && self.root_radius.is_finite()) {
            return bad(format!("root radius {} must be >= 1", self.root_radius));
        }
        if !(self.radius_decay > 0.0 && self.radius_decay < 1.0) {
            return bad(format!("radius decay {} must lie in (0, 1)", self.radius_decay));
        }
        self.branch_length.validate("branch length")?;
        self.branch_angle_deg.validate("branch angle")?;
        self.break_margin.validate("break margin")?;
        self.blob_radius.validate("blob radius")?;
        if self.branch_length.min <= 0.0 || self.blob_radius.min <= 0.0 || self.break_margin.min < 0.0 {
            return bad("lengths and radii must be positive".into());
        }
        if self.blob_reach.is_some_and(|w| !(w >= 1.0 && w.is_finite())) {
            return bad("blob reach must be at least 1 voxel".into());
        }
        if !(0.0..0.5).contains(&self.noise) || !(self.blob_clearance >= 0.0) {
            return bad("noise must lie in [0, 0.5) and blob clearance be >= 0".into());
        }
        if !(self.background > 0.0 && self.background < 0.5 && self.foreground > 0.5 && self.foreground < 1.0) {
            return bad("need 0 < background < 0.5 < foreground < 1".into());
        }
        if self.max_attempts == 0 {
            return bad("max attempts must be at least 1".into());
        }
        Ok(())
    }

    /// Radius of tubes in generation `g` (root = 0).
    pub fn radius_at(&self, g: usize) -> f64 {
        self.root_radius * self.radius_decay.powi(g as i32)
    }
}

type Vec3 = [f64; 3];

fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / dot(a, a).sqrt())
}

fn point_segment_distance(p: Vec3, a: Vec3, b: Vec3) -> f64 {
    let ab = sub(b, a);
    let t = (dot(sub(p, a), ab) / dot(ab, ab)).clamp(0.0, 1.0);
    let d = sub(p, add(a, scale(ab, t)));
    dot(d, d).sqrt()
}

fn voxel_point(v: VoxelCoord) -> Vec3 {
    [v.x as f64, v.y as f64, v.z as f64]
}

/// One straight tube of the tree.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub id: usize,
    pub parent: Option<usize>,
    pub generation: usize,
    pub start: Vec3,
    pub end: Vec3,
    pub radius: f64,
}

impl Branch {
    fn related(&self, other: &Branch) -> bool {
        self.id == other.id
            || self.parent == Some(other.id)
            || other.parent == Some(self.id)
            || (self.parent.is_some() && self.parent == other.parent)
    }
}

fn segment_gap(a: &Branch, b: &Branch) -> f64 {
    const SAMPLES: usize = 64;
    let mut best = f64::INFINITY;
    for k in 0..=SAMPLES {
        let t = k as f64 / SAMPLES as f64;
        let pa = add(a.start, scale(sub(a.end, a.start), t));
        let pb = add(b.start, scale(sub(b.end, b.start), t));
        best = best
            .min(point_segment_distance(pa, b.start, b.end))
            .min(point_segment_distance(pb, a.start, a.end));
    }
    best
}

fn child_direction(parent: Vec3, angle: f64, azimuth: f64) -> Vec3 {
    let helper = if parent[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let u = normalize(cross(parent, helper));
    let v = cross(parent, u);
    let radial = add(scale(u, azimuth.cos()), scale(v, azimuth.sin()));
    normalize(add(scale(parent, angle.cos()), scale(radial, angle.sin())))
}

fn layout_tree(cfg: &PhantomConfig, rng: &mut PhantomRng) -> Vec<Branch> {
    let d = cfg.dims;
    let start = [
        (d.nx as f64 - 1.0) / 2.0,
        (d.ny as f64 - 1.0) / 2.0,
        cfg.root_radius * 2.0,
    ];
    let tilt = cfg.branch_angle_deg.min.to_radians() * 0.25 * rng.uniform();
    let dir = child_direction([0.0, 0.0, 1.0], tilt, std::f64::consts::TAU * rng.uniform());
    let len = rng.range(cfg.branch_length);
    let mut branches = vec![Branch {
        id: 0,
        parent: None,
        generation: 0,
        start,
        end: add(start, scale(dir, len)),
        radius: cfg.radius_at(0),
    }];
    let mut next = 0;
    while next < branches.len() {
        let parent = branches[next];
        next += 1;
        if parent.generation + 1 >= cfg.generations {
            continue;
        }
        let pdir = normalize(sub(parent.end, parent.start));
        let azimuth = std::f64::consts::TAU * rng.uniform();
        for side in 0..2 {
            let angle = rng.range(cfg.branch_angle_deg).to_radians();
            let phi = azimuth + std::f64::consts::PI * side as f64;
            let cdir = child_direction(pdir, angle, phi);
            let len = rng.range(cfg.branch_length);
            let id = branches.len();
            branches.push(Branch {
                id,
                parent: Some(parent.id),
                generation: parent.generation + 1,
                start: parent.end,
                end: add(parent.end, scale(cdir, len)),
                radius: cfg.radius_at(parent.generation + 1),
            });
        }
    }
    branches
}

fn tree_fits(cfg: &PhantomConfig, branches: &[Branch]) -> bool {
    let ext = cfg.dims.as_array();
    let margin = cfg.root_radius;
    let inside = |p: Vec3, r: f64| {
        (0..3).all(|a| p[a] - r >= margin && p[a] + r <= ext[a] as f64 - 1.0 - margin)
    };
    if !branches.iter().all(|b| inside(b.start, b.radius) && inside(b.end, b.radius)) {
        return false;
    }
    for (i, a) in branches.iter().enumerate() {
        for b in &branches[i + 1..] {
            if !a.related(b) && segment_gap(a, b) < a.radius + b.radius + 4.0 {
                return false;
            }
        }
    }
    true
}

fn rasterize_tree(dims: Dims, branches: &[Branch]) -> Vec<bool> {
    let mut mask = vec![false; dims.len()];
    let ext = dims.as_array();
    for b in branches {
        let lo: Vec<usize> = (0..3)
            .map(|a| (b.start[a].min(b.end[a]) - b.radius).floor().max(0.0) as usize)
            .collect();
        let hi: Vec<usize> = (0..3)
            .map(|a| ((b.start[a].max(b.end[a]) + b.radius).ceil() as usize).min(ext[a] - 1))
            .collect();
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let p = [x as f64, y as f64, z as f64];
                    if point_segment_distance(p, b.start, b.end) <= b.radius {
                        mask[dims.index(x, y, z)] = true;
                    }
                }
            }
        }
    }
    mask
}

fn trace_centerline(dims: Dims, branches: &[Branch]) -> Vec<CenterlinePoint> {
    let mut owner = vec![usize::MAX; dims.len()];
    let mut points = Vec::new();
    for b in branches {
        let len = dot(sub(b.end, b.start), sub(b.end, b.start)).sqrt();
        let steps = (len * 4.0).ceil() as usize;
        for k in 0..=steps {
            let p = add(b.start, scale(sub(b.end, b.start), k as f64 / steps as f64));
            let v = VoxelCoord::new(
                p[0].round() as usize,
                p[1].round() as usize,
                p[2].round() as usize,
            );
            let i = dims.index_of(v);
            if owner[i] == usize::MAX {
                owner[i] = b.id;
                points.push(CenterlinePoint {
                    voxel: v,
                    branch: b.id,
                });
            }
        }
    }
    points
}

/// Ground-truth tree geometry, mask and centerline.
#[derive(Clone, Debug)]
pub struct Tree {
    pub branches: Vec<Branch>,
    pub mask: Volume,
    pub centerline: CenterlineTruth,
}

fn build_tree(cfg: &PhantomConfig, rng: &mut PhantomRng) -> Result<Tree> {
    for _ in 0..cfg.max_attempts {
        let branches = layout_tree(cfg, rng);
        if !tree_fits(cfg, &branches) {
            continue;
        }
        let inside = rasterize_tree(cfg.dims, &branches);
        let mask = Volume::mask_from_fn(cfg.dims, cfg.spacing, |i| inside[i]);
        let centerline = CenterlineTruth::new(trace_centerline(cfg.dims, &branches))?;
        centerline.validate_against(&mask)?;
        if count_components(cfg.dims, Connectivity::TwentySix, |i| inside[i]) != 1 {
            continue;
        }
        return Ok(Tree {
            branches,
            mask,
            centerline,
        });
    }
    Err(Error::Placement(format!(
        "no tree of {} generations fit in {:?} after {} attempts; try larger dims or shorter branches",
        cfg.generations,
        cfg.dims.as_array(),
        cfg.max_attempts
    )))
}

pub fn generate_tree(cfg: &PhantomConfig) -> Result<(Volume, CenterlineTruth)> {
    cfg.validate()?;
    let tree = build_tree(cfg, &mut PhantomRng::new(cfg.seed))?;
    Ok((tree.mask, tree.centerline))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BreakRecord {
    pub center: VoxelCoord,
    pub branch: usize,
    pub radius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobRecord {
    pub center: VoxelCoord,
    pub radii: [f64; 3],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRecord {
    pub breaks: Vec<BreakRecord>,
    pub blobs: Vec<BlobRecord>,
    /// Corruption attempts consumed before validation passed.
    pub attempts: usize,
}

#[derive(Clone, Debug)]
pub struct PhantomCase {
    pub config: PhantomConfig,
    pub gt_mask: Volume,
    pub centerline: CenterlineTruth,
    pub init_prob: Volume,
    pub corruption: CorruptionRecord,
}

fn break_candidates(tree: &Tree, cfg: &PhantomConfig) -> Vec<(VoxelCoord, usize, f64)> {
    let joints: Vec<Vec3> = tree
        .branches
        .iter()
        .filter(|b| b.parent.is_some())
        .map(|b| b.start)
        .collect();
    let mut out = Vec::new();
    for pt in tree.centerline.points() {
        let b = &tree.branches[pt.branch];
        let p = voxel_point(pt.voxel);
        let reach = b.radius + cfg.break_margin.max;
        let near_joint = joints
            .iter()
            .any(|j| dot(sub(p, *j), sub(p, *j)).sqrt() <= 2.0 * reach);
        let from_start = dot(sub(p, b.start), sub(p, b.start)).sqrt();
        let from_end = dot(sub(p, b.end), sub(p, b.end)).sqrt();
        if !near_joint && from_start > reach + 2.0 && from_end > reach + 2.0 {
            out.push((pt.voxel, pt.branch, b.radius));
        }
    }
    out
}

fn apply_ball(dims: Dims, mask: &mut [bool], center: Vec3, radii: Vec3, value: bool) {
    let ext = dims.as_array();
    let lo: Vec<usize> = (0..3)
        .map(|a| (center[a] - radii[a]).floor().max(0.0) as usize)
        .collect();
    let hi: Vec<usize> = (0..3)
        .map(|a| ((center[a] + radii[a]).ceil().max(0.0) as usize).min(ext[a] - 1))
        .collect();
    for z in lo[2]..=hi[2] {
        for y in lo[1]..=hi[1] {
            for x in lo[0]..=hi[0] {
                let q = [
                    (x as f64 - center[0]) / radii[0],
                    (y as f64 - center[1]) / radii[1],
                    (z as f64 - center[2]) / radii[2],
                ];
                if dot(q, q) <= 1.0 {
                    mask[dims.index(x, y, z)] = value;
                }
            }
        }
    }
}

fn place_breaks(
    tree: &Tree,
    cfg: &PhantomConfig,
    rng: &mut PhantomRng,
    mask: &mut [bool],
) -> Option<Vec<BreakRecord>> {
    let dims = cfg.dims;
    let candidates = break_candidates(tree, cfg);
    let mut records: Vec<BreakRecord> = Vec::new();
    let mut components = count_components(dims, Connectivity::TwentySix, |i| mask[i]);
    let mut tries = 0;
    while records.len() < cfg.breaks {
        tries += 1;
        if candidates.is_empty() || tries > 50 * cfg.breaks.max(1) {
            return None;
        }
        let (center, branch, r) = candidates[rng.below(candidates.len())];
        let radius = r + rng.range(cfg.break_margin);
        let p = voxel_point(center);
        let clear = records.iter().all(|b| {
            let q = voxel_point(b.center);
            dot(sub(p, q), sub(p, q)).sqrt() > radius + b.radius + 4.0
        });
        if !clear {
            continue;
        }
        let before = mask.to_vec();
        apply_ball(dims, mask, p, [radius; 3], false);
        let now = count_components(dims, Connectivity::TwentySix, |i| mask[i]);
        if now > components {
            components = now;
            records.push(BreakRecord {
                center,
                branch,
                radius,
            });
        } else {
            mask.copy_from_slice(&before);
        }
    }
    Some(records)
}

fn place_blobs(
    cfg: &PhantomConfig,
    rng: &mut PhantomRng,
    tree_mask: &[bool],
    mask: &mut [bool],
) -> Option<Vec<BlobRecord>> {
    let dims = cfg.dims;
    let ext = dims.as_array();
    let mut occupied = tree_mask.to_vec();
    let mut records = Vec::new();
    let mut tries = 0;
    while records.len() < cfg.blobs {
        tries += 1;
        if tries > 100 * cfg.blobs.max(1) {
            return None;
        }
        let radii = [
            rng.range(cfg.blob_radius),
            rng.range(cfg.blob_radius),
            rng.range(cfg.blob_radius),
        ];
        let dist = squared_distance_transform(&occupied, dims, [1.0; 3]);
        let limit = (cfg.blob_clearance + 1.0).powi(2);
        let center: Vec3 = match cfg.blob_reach {
            None => std::array::from_fn(|a| {
                let lo = radii[a] + 1.0;
                let hi = ext[a] as f64 - 2.0 - radii[a];
                (lo + (hi - lo).max(0.0) * rng.uniform()).round()
            }),
            Some(reach) => {
                let inner = cfg.blob_clearance + 1.0 + radii.iter().copied().fold(0.0, f64::max);
                let band = inner.powi(2)..=(inner + reach).powi(2);
                let candidates: Vec<usize> = (0..dims.len())
                    .filter(|&i| band.contains(&dist[i]) && interior(dims.coord(i), ext, radii))
                    .collect();
                if candidates.is_empty() {
                    continue;
                }
                let c = dims.coord(candidates[rng.below(candidates.len())]);
                [c.x as f64, c.y as f64, c.z as f64]
            }
        };
        let mut blob = vec![false; dims.len()];
        apply_ball(dims, &mut blob, center, radii, true);
        if blob.iter().zip(&dist).any(|(b, d)| *b && *d < limit) {
            continue;
        }
        for (i, b) in blob.iter().enumerate() {
            if *b {
                mask[i] = true;
                occupied[i] = true;
            }
        }
        records.push(BlobRecord {
            center: VoxelCoord::new(center[0] as usize, center[1] as usize, center[2] as usize),
            radii,
        });
    }
    Some(records)
}

fn interior(c: VoxelCoord, ext: [usize; 3], radii: Vec3) -> bool {
    let c = [c.x, c.y, c.z];
    (0..3).all(|a| c[a] as f64 >= radii[a] + 1.0 && (c[a] as f64) <= ext[a] as f64 - 2.0 - radii[a])
}

// One 3³ box-mean pass, replicate-padded, as three axis passes.
fn box_blur(values: &[f64], dims: Dims) -> Vec<f64> {
    let mut cur = values.to_vec();
    let ext = dims.as_array();
    let strides = [1, dims.nx, dims.nx * dims.ny];
    for axis in 0..3 {
        let n = ext[axis];
        let s = strides[axis];
        let mut next = vec![0.0; cur.len()];
        for (i, out) in next.iter_mut().enumerate() {
            let k = (i / s) % n;
            let lo = if k > 0 { i - s } else { i };
            let hi = if k + 1 < n { i + s } else { i };
            *out = (cur[lo] + cur[i] + cur[hi]) / 3.0;
        }
        cur = next;
    }
    cur
}

fn to_probability(cfg: &PhantomConfig, rng: &mut PhantomRng, mask: &[bool]) -> Vec<f64> {
    let base: Vec<f64> = mask
        .iter()
        .map(|m| if *m { cfg.foreground } else { cfg.background })
        .collect();
    box_blur(&base, cfg.dims)
        .into_iter()
        .map(|v| {
            let noise = cfg.noise * (2.0 * rng.uniform() - 1.0);
            (v + noise).clamp(0.01, 0.99)
        })
        .collect()
}

fn corrupt_with(
    tree: &Tree,
    cfg: &PhantomConfig,
    rng: &mut PhantomRng,
) -> Result<(Volume, CorruptionRecord)> {
    let dims = cfg.dims;
    let tree_mask: Vec<bool> = tree.mask.data().iter().map(|v| *v != 0.0).collect();
    for attempt in 1..=cfg.max_attempts {
        let mut mask = tree_mask.clone();
        let Some(breaks) = place_breaks(tree, cfg, rng, &mut mask) else {
            continue;
        };
        let Some(blobs) = place_blobs(cfg, rng, &tree_mask, &mut mask) else {
            continue;
        };
        let probs = to_probability(cfg, rng, &mask);
        let beta0 = count_components(dims, Connectivity::TwentySix, |i| probs[i] > 0.5);
        let enough = beta0 > cfg.blobs && (cfg.breaks == 0 || beta0 > 1 + cfg.blobs);
        if !enough {
            continue;
        }
        let init = Volume::new(dims, cfg.spacing, Role::Probability, probs)?;
        return Ok((
            init,
            CorruptionRecord {
                breaks,
                blobs,
                attempts: attempt,
            },
        ));
    }
    Err(Error::Placement(format!(
        "could not place {} breaks and {} detached blobs after {} attempts; try larger dims or fewer corruptions",
        cfg.breaks, cfg.blobs, cfg.max_attempts
    )))
}

/// Corrupts a generated tree. Uses a generator stream derived from the seed
/// that is independent of the one used for the tree layout.
pub fn corrupt(tree: &Tree, cfg: &PhantomConfig) -> Result<(Volume, CorruptionRecord)> {
    cfg.validate()?;
    let mut rng = PhantomRng::new(cfg.seed ^ 0xC0AA_u64.rotate_left(48));
    corrupt_with(tree, cfg, &mut rng)
}

/// Full case generation: tree, then corruption.
pub fn generate(cfg: &PhantomConfig) -> Result<PhantomCase> {
    cfg.validate()?;
    let tree = build_tree(cfg, &mut PhantomRng::new(cfg.seed))?;
    let (init_prob, corruption) = corrupt(&tree, cfg)?;
    Ok(PhantomCase {
        config: *cfg,
        gt_mask: tree.mask,
        centerline: tree.centerline,
        init_prob,
        corruption,
    })
}

/// Tree geometry for `cfg`, as used by [`generate`].
pub fn build(cfg: &PhantomConfig) -> Result<Tree> {
    cfg.validate()?;
    build_tree(cfg, &mut PhantomRng::new(cfg.seed))
}
