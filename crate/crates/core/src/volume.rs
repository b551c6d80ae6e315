//! Dense 3D scalar grids and the voxel neighborhoods shared by every other module.
//!
//! Data is linearized x-fastest, then y, then z: the voxel `(x, y, z)` lives at
//! `x + nx * (y + ny * z)`. File I/O uses the same order.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Excursions outside `[0, 1]` up to this size are clamped; larger ones are errors.
pub const RANGE_SLACK: f64 = 1e-9;

/// What the values of a [`Volume`] mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Probability,
    Logit,
    Binary,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Probability => "probability",
            Role::Logit => "logit",
            Role::Binary => "binary",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VoxelCoord {
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl VoxelCoord {
    pub const fn new(x: usize, y: usize, z: usize) -> Self {
        Self { x, y, z }
    }
}

/// Grid extent `(nx, ny, nz)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Self { nx, ny, nz }
    }

    pub const fn cube(n: usize) -> Self {
        Self::new(n, n, n)
    }

    pub const fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    #[inline]
    pub const fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub fn index_of(&self, v: VoxelCoord) -> usize {
        debug_assert!(self.contains(v));
        self.index(v.x, v.y, v.z)
    }

    #[inline]
    pub const fn coord(&self, index: usize) -> VoxelCoord {
        let x = index % self.nx;
        let rest = index / self.nx;
        VoxelCoord {
            x,
            y: rest % self.ny,
            z: rest / self.ny,
        }
    }

    pub const fn contains(&self, v: VoxelCoord) -> bool {
        v.x < self.nx && v.y < self.ny && v.z < self.nz
    }

    /// Like [`Dims::for_each_neighbor`], with a bounds-check-free path for
    /// voxels away from the border. Visits neighbors in the same order.
    #[inline]
    pub fn for_each_neighbor_fast(&self, index: usize, conn: Connectivity, mut f: impl FnMut(usize)) {
        let c = self.coord(index);
        let interior = c.x > 0
            && c.y > 0
            && c.z > 0
            && c.x + 1 < self.nx
            && c.y + 1 < self.ny
            && c.z + 1 < self.nz;
        if !interior {
            return self.for_each_neighbor(index, conn, f);
        }
        let (sy, sz) = (self.nx as isize, (self.nx * self.ny) as isize);
        for &(dx, dy, dz) in conn.offsets() {
            f((index as isize + dx + dy * sy + dz * sz) as usize);
        }
    }

    /// Calls `f` with the linear index of every in-bounds neighbor of `index`.
    #[inline]
    pub fn for_each_neighbor(&self, index: usize, conn: Connectivity, mut f: impl FnMut(usize)) {
        let c = self.coord(index);
        let (x, y, z) = (c.x as isize, c.y as isize, c.z as isize);
        let (nx, ny, nz) = (self.nx as isize, self.ny as isize, self.nz as isize);
        for &(dx, dy, dz) in conn.offsets() {
            let (px, py, pz) = (x + dx, y + dy, z + dz);
            if px >= 0 && py >= 0 && pz >= 0 && px < nx && py < ny && pz < nz {
                f(self.index(px as usize, py as usize, pz as usize));
            }
        }
    }
}

/// Voxel adjacency: face (6), face+edge (18) or face+edge+corner (26).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "6")]
    Six,
    #[serde(rename = "18")]
    Eighteen,
    #[default]
    #[serde(rename = "26")]
    TwentySix,
}

// Ordered by L1 norm so each connectivity is a prefix.
const OFFSETS: [(isize, isize, isize); 26] = [
    (-1, 0, 0),
    (1, 0, 0),
    (0, -1, 0),
    (0, 1, 0),
    (0, 0, -1),
    (0, 0, 1),
    (-1, -1, 0),
    (1, -1, 0),
    (-1, 1, 0),
    (1, 1, 0),
    (-1, 0, -1),
    (1, 0, -1),
    (-1, 0, 1),
    (1, 0, 1),
    (0, -1, -1),
    (0, 1, -1),
    (0, -1, 1),
    (0, 1, 1),
    (-1, -1, -1),
    (1, -1, -1),
    (-1, 1, -1),
    (1, 1, -1),
    (-1, -1, 1),
    (1, -1, 1),
    (-1, 1, 1),
    (1, 1, 1),
];

impl Connectivity {
    pub fn from_count(count: u32) -> Option<Self> {
        match count {
            6 => Some(Self::Six),
            18 => Some(Self::Eighteen),
            26 => Some(Self::TwentySix),
            _ => None,
        }
    }

    pub const fn count(self) -> usize {
        match self {
            Self::Six => 6,
            Self::Eighteen => 18,
            Self::TwentySix => 26,
        }
    }

    pub fn offsets(self) -> &'static [(isize, isize, isize)] {
        &OFFSETS[..self.count()]
    }
}

/// All in-bounds voxels adjacent to `v` under `conn`.
pub fn neighbors(v: VoxelCoord, dims: Dims, conn: Connectivity) -> Vec<VoxelCoord> {
    let mut out = Vec::with_capacity(conn.count());
    dims.for_each_neighbor(dims.index_of(v), conn, |n| out.push(dims.coord(n)));
    out
}

/// A dense 3D scalar grid tagged with the meaning of its values.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: [f64; 3],
    role: Role,
    data: Vec<f64>,
}

impl Volume {
    /// Builds a volume, validating the data against `role`.
    ///
    /// Probability values within [`RANGE_SLACK`] of `[0, 1]` are clamped.
    pub fn new(dims: Dims, spacing: [f64; 3], role: Role, mut data: Vec<f64>) -> Result<Self> {
        if dims.nx == 0 || dims.ny == 0 || dims.nz == 0 {
            return Err(Error::InvalidDims(dims.as_array()));
        }
        if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::InvalidSpacing(spacing));
        }
        if data.len() != dims.len() {
            return Err(Error::LengthMismatch {
                dims: dims.as_array(),
                len: data.len(),
            });
        }
        validate_role(dims, role, &mut data)?;
        Ok(Self {
            dims,
            spacing,
            role,
            data,
        })
    }

    pub fn filled(dims: Dims, spacing: [f64; 3], role: Role, value: f64) -> Result<Self> {
        Self::new(dims, spacing, role, vec![value; dims.len()])
    }

    pub fn from_fn(
        dims: Dims,
        spacing: [f64; 3],
        role: Role,
        mut f: impl FnMut(VoxelCoord) -> f64,
    ) -> Result<Self> {
        let data = (0..dims.len()).map(|i| f(dims.coord(i))).collect();
        Self::new(dims, spacing, role, data)
    }

    /// Binary mask from a predicate over linear indices.
    pub fn mask_from_fn(dims: Dims, spacing: [f64; 3], mut f: impl FnMut(usize) -> bool) -> Self {
        let data = (0..dims.len())
            .map(|i| if f(i) { 1.0 } else { 0.0 })
            .collect();
        Self {
            dims,
            spacing,
            role: Role::Binary,
            data,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Raw mutable access; callers keep the role's value constraints.
    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, v: VoxelCoord) -> f64 {
        self.data[self.dims.index_of(v)]
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::InvalidSpacing(spacing));
        }
        self.spacing = spacing;
        Ok(self)
    }

    /// Reinterprets the values under another role, re-validating them.
    pub fn retag(self, role: Role) -> Result<Self> {
        Self::new(self.dims, self.spacing, role, self.data)
    }

    /// Same geometry, new values and role.
    pub fn with_data(&self, role: Role, data: Vec<f64>) -> Result<Self> {
        Self::new(self.dims, self.spacing, role, data)
    }

    pub fn expect_role(&self, role: Role) -> Result<()> {
        if self.role == role {
            Ok(())
        } else {
            Err(Error::RoleMismatch {
                expected: role,
                found: self.role,
            })
        }
    }

    pub fn ensure_same_dims(&self, other: &Volume) -> Result<()> {
        if self.dims == other.dims {
            Ok(())
        } else {
            Err(Error::DimMismatch {
                left: self.dims.as_array(),
                right: other.dims.as_array(),
            })
        }
    }

    /// Number of voxels with a non-zero value.
    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }
}

fn validate_role(dims: Dims, role: Role, data: &mut [f64]) -> Result<()> {
    for (i, v) in data.iter_mut().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                voxel: dims.coord(i),
                value: *v,
            });
        }
        match role {
            Role::Logit => {}
            Role::Binary => {
                if *v != 0.0 && *v != 1.0 {
                    return Err(Error::OutOfRange {
                        voxel: dims.coord(i),
                        value: *v,
                        role,
                    });
                }
            }
            Role::Probability => {
                if *v < -RANGE_SLACK || *v > 1.0 + RANGE_SLACK {
                    return Err(Error::OutOfRange {
                        voxel: dims.coord(i),
                        value: *v,
                        role,
                    });
                }
                *v = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(())
}

/// `1` where `p > threshold` (strict), else `0`.
pub fn binarize(p: &Volume, threshold: f64) -> Result<Volume> {
    p.expect_role(Role::Probability)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "threshold {threshold} must lie in (0, 1)"
        )));
    }
    Ok(binarize_unchecked(p, threshold))
}

pub(crate) fn binarize_unchecked(p: &Volume, threshold: f64) -> Volume {
    Volume::mask_from_fn(p.dims, p.spacing, |i| p.data[i] > threshold)
}

#[inline]
pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit_scalar(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Elementwise logistic function of a logit volume.
pub fn sigmoid(l: &Volume) -> Result<Volume> {
    l.expect_role(Role::Logit)?;
    let data = l.data.iter().map(|v| sigmoid_scalar(*v)).collect();
    Ok(Volume {
        dims: l.dims,
        spacing: l.spacing,
        role: Role::Probability,
        data,
    })
}
