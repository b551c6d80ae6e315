//! Morphological soft skeleton built from min/max pooling.
//!
//! Borders are replicate-padded.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, Volume};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// Three consecutive axis-aligned 3-voxel passes (equivalent to a 3³ window).
    #[default]
    Separable3,
    /// One direct 3³ window, kept for cross-checking.
    Cubic3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkeletonParams {
    pub iterations: usize,
    pub pooling: Pooling,
}

impl Default for SkeletonParams {
    fn default() -> Self {
        Self {
            iterations: 5,
            pooling: Pooling::Separable3,
        }
    }
}

impl SkeletonParams {
    pub fn new(iterations: usize, pooling: Pooling) -> Result<Self> {
        let params = Self {
            iterations,
            pooling,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidParameter(
                "skeleton iterations must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Extremum {
    Min,
    Max,
}

impl Extremum {
    #[inline]
    fn pick(self, a: f64, b: f64) -> f64 {
        match self {
            Extremum::Min => a.min(b),
            Extremum::Max => a.max(b),
        }
    }
}

fn pass_axis(src: &[f64], dst: &mut [f64], dims: Dims, axis: usize, op: Extremum) {
    let (n, stride) = match axis {
        0 => (dims.nx, 1),
        1 => (dims.ny, dims.nx),
        _ => (dims.nz, dims.nx * dims.ny),
    };
    if n == 1 {
        dst.copy_from_slice(src);
        return;
    }
    // Blocks of `n * stride` values hold `stride` interleaved lines.
    let block = n * stride;
    for (s, d) in src.chunks_exact(block).zip(dst.chunks_exact_mut(block)) {
        for k in 0..n {
            let lo = if k > 0 { k - 1 } else { 0 };
            let hi = if k + 1 < n { k + 1 } else { k };
            let (a, b, c) = (lo * stride, k * stride, hi * stride);
            for j in 0..stride {
                d[b + j] = op.pick(op.pick(s[b + j], s[a + j]), s[c + j]);
            }
        }
    }
}

fn pool_separable(values: &[f64], dims: Dims, op: Extremum) -> Vec<f64> {
    let mut a = values.to_vec();
    let mut b = vec![0.0; values.len()];
    for axis in 0..3 {
        pass_axis(&a, &mut b, dims, axis, op);
        std::mem::swap(&mut a, &mut b);
    }
    a
}

fn pool_cubic(values: &[f64], dims: Dims, op: Extremum) -> Vec<f64> {
    let clamp = |c: usize, d: isize, n: usize| (c as isize + d).clamp(0, n as isize - 1) as usize;
    (0..values.len())
        .map(|i| {
            let c = dims.coord(i);
            let mut acc = values[i];
            for dz in -1..=1 {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let j = dims.index(
                            clamp(c.x, dx, dims.nx),
                            clamp(c.y, dy, dims.ny),
                            clamp(c.z, dz, dims.nz),
                        );
                        acc = op.pick(acc, values[j]);
                    }
                }
            }
            acc
        })
        .collect()
}

fn pool(values: &[f64], dims: Dims, pooling: Pooling, op: Extremum) -> Vec<f64> {
    match pooling {
        Pooling::Separable3 => pool_separable(values, dims, op),
        Pooling::Cubic3 => pool_cubic(values, dims, op),
    }
}

pub(crate) fn erode_values(values: &[f64], dims: Dims, pooling: Pooling) -> Vec<f64> {
    pool(values, dims, pooling, Extremum::Min)
}

pub(crate) fn dilate_values(values: &[f64], dims: Dims, pooling: Pooling) -> Vec<f64> {
    pool(values, dims, pooling, Extremum::Max)
}

/// Minimum over the pooling neighborhood.
pub fn soft_erode(v: &Volume, pooling: Pooling) -> Volume {
    let data = erode_values(v.data(), v.dims(), pooling);
    v.with_data(v.role(), data)
        .expect("min-pooling keeps values in range")
}

/// Maximum over the pooling neighborhood.
pub fn soft_dilate(v: &Volume, pooling: Pooling) -> Volume {
    let data = dilate_values(v.data(), v.dims(), pooling);
    v.with_data(v.role(), data)
        .expect("max-pooling keeps values in range")
}

fn ridge(values: &[f64], dims: Dims, pooling: Pooling) -> Vec<f64> {
    let opened = dilate_values(&erode_values(values, dims, pooling), dims, pooling);
    values
        .iter()
        .zip(&opened)
        .map(|(v, o)| (v - o).max(0.0))
        .collect()
}

pub(crate) fn soft_skel_values(values: &[f64], dims: Dims, params: SkeletonParams) -> Vec<f64> {
    let mut img = values.to_vec();
    let mut skel = ridge(&img, dims, params.pooling);
    for _ in 0..params.iterations {
        img = erode_values(&img, dims, params.pooling);
        let delta = ridge(&img, dims, params.pooling);
        for (s, d) in skel.iter_mut().zip(&delta) {
            *s += (d * (1.0 - *s)).max(0.0);
        }
    }
    skel
}

/// Iterative soft skeleton of a `[0, 1]`-valued volume.
pub fn soft_skel(v: &Volume, params: SkeletonParams) -> Result<Volume> {
    params.validate()?;
    if v.data().iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(Error::InvalidParameter(
            "soft skeleton input must lie in [0, 1]".into(),
        ));
    }
    let data = soft_skel_values(v.data(), v.dims(), params);
    v.with_data(v.role(), data)
}
