//! 0-dimensional persistent homology of the superlevel-set filtration of a
//! probability volume, computed on the vertex (V-) construction.
//!
//! Voxels enter the filtration in decreasing value order, ties broken by
//! ascending linear index. Voxels whose value is exactly zero never enter, so
//! an all-zero volume has an empty barcode. When two components meet, the one
//! whose birth came later in that order dies at the merging voxel (elder
//! rule). Survivors are essential and die at 0 by convention.

use std::cmp::Ordering;
use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Connectivity, Dims, Role, Volume, VoxelCoord};

/// One 0-dimensional feature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersistencePair {
    pub birth: f64,
    pub death: f64,
    pub birth_voxel: VoxelCoord,
    pub death_voxel: Option<VoxelCoord>,
    pub essential: bool,
}

impl PersistencePair {
    pub fn persistence(&self) -> f64 {
        self.birth - self.death
    }
}

/// Pairs sorted by persistence descending, then birth descending, then
/// birth voxel ascending.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Barcode {
    pairs: Vec<PersistencePair>,
}

impl Barcode {
    pub fn from_pairs(mut pairs: Vec<PersistencePair>) -> Self {
        pairs.sort_by(barcode_order);
        Self { pairs }
    }

    pub fn pairs(&self) -> &[PersistencePair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn essential_count(&self) -> usize {
        self.pairs.iter().filter(|p| p.essential).count()
    }

    /// Number of features alive at `level`, i.e. with `birth >= level > death`.
    /// This is β₀ of `{value >= level}`.
    pub fn betti_at_inclusive(&self, level: f64) -> usize {
        self.pairs
            .iter()
            .filter(|p| p.birth >= level && level > p.death)
            .count()
    }

    /// Number of features with `birth > threshold >= death`, i.e. β₀ of
    /// `{value > threshold}`.
    pub fn betti_above(&self, threshold: f64) -> usize {
        self.pairs
            .iter()
            .filter(|p| p.birth > threshold && threshold >= p.death)
            .count()
    }
}

fn barcode_order(a: &PersistencePair, b: &PersistencePair) -> Ordering {
    b.persistence()
        .total_cmp(&a.persistence())
        .then_with(|| b.birth.total_cmp(&a.birth))
        .then_with(|| a.birth_voxel.cmp(&b.birth_voxel))
}

const OUTSIDE: u32 = u32::MAX;

/// Union-find over voxels in which every root is the oldest voxel of its
/// component: a merge hangs the younger root below the older one.
struct ComponentForest {
    // Per voxel: (parent, filtration position or OUTSIDE before entry).
    nodes: Vec<[u32; 2]>,
}

impl ComponentForest {
    fn new(n: usize) -> Self {
        Self {
            nodes: (0..n as u32).map(|i| [i, OUTSIDE]).collect(),
        }
    }

    #[inline]
    fn position(&self, v: u32) -> u32 {
        self.nodes[v as usize][1]
    }

    fn find(&mut self, mut node: u32) -> u32 {
        let mut root = node;
        while self.nodes[root as usize][0] != root {
            root = self.nodes[root as usize][0];
        }
        while self.nodes[node as usize][0] != root {
            let next = self.nodes[node as usize][0];
            self.nodes[node as usize][0] = root;
            node = next;
        }
        root
    }
}

/// Linear indices of the support in filtration order.
fn filtration_order(values: &[f64]) -> Vec<u32> {
    // For non-negative floats the bit pattern orders like the value, so
    // complementing it sorts descending; the index breaks ties ascending.
    let mut keyed: Vec<(u64, u32)> = values
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, v)| (!v.to_bits(), i as u32))
        .collect();
    keyed.sort_unstable();
    keyed.into_iter().map(|(_, i)| i).collect()
}

/// 0-dimensional superlevel-set persistence of `p`.
pub fn compute_ph0(p: &Volume, conn: Connectivity) -> Result<Barcode> {
    p.expect_role(Role::Probability)?;
    if p.is_empty() {
        return Err(Error::EmptyVolume);
    }
    Ok(Barcode::from_pairs(ph0_pairs(p.data(), p.dims(), conn)))
}

pub(crate) fn ph0_pairs(values: &[f64], dims: Dims, conn: Connectivity) -> Vec<PersistencePair> {
    let order = filtration_order(values);
    let mut forest = ComponentForest::new(values.len());
    let mut pairs = Vec::new();

    for (pos, &v) in order.iter().enumerate() {
        let vi = v as usize;
        forest.nodes[vi][1] = pos as u32;
        let death = values[vi];
        let mut rv = v;
        dims.for_each_neighbor_fast(vi, conn, |u| {
            if forest.nodes[u][1] == OUTSIDE {
                return;
            }
            let ru = forest.find(u as u32);
            if ru == rv {
                return;
            }
            let (elder, younger) = if forest.position(ru) < forest.position(rv) {
                (ru, rv)
            } else {
                (rv, ru)
            };
            let birth = values[younger as usize];
            if birth > death {
                pairs.push(PersistencePair {
                    birth,
                    death,
                    birth_voxel: dims.coord(younger as usize),
                    death_voxel: Some(dims.coord(vi)),
                    essential: false,
                });
            }
            forest.nodes[younger as usize][0] = elder;
            rv = elder;
        });
    }

    for &v in &order {
        if forest.nodes[v as usize][0] == v {
            pairs.push(PersistencePair {
                birth: values[v as usize],
                death: 0.0,
                birth_voxel: dims.coord(v as usize),
                death_voxel: None,
                essential: true,
            });
        }
    }
    pairs
}

/// Number of connected components of `{value > threshold}`.
pub fn betti0_at(p: &Volume, threshold: f64, conn: Connectivity) -> Result<usize> {
    p.expect_role(Role::Probability)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "threshold {threshold} must lie in (0, 1)"
        )));
    }
    let data = p.data();
    Ok(count_components(p.dims(), conn, |i| data[i] > threshold))
}

/// Counts connected components of the voxels selected by `inside`, by
/// breadth-first flood fill.
pub fn count_components(dims: Dims, conn: Connectivity, inside: impl Fn(usize) -> bool) -> usize {
    label_components(dims, conn, inside).1
}

/// Labels components 1..=count (0 = outside) by breadth-first flood fill.
pub fn label_components(
    dims: Dims,
    conn: Connectivity,
    inside: impl Fn(usize) -> bool,
) -> (Vec<u32>, usize) {
    let mut labels = vec![0u32; dims.len()];
    let mut count = 0u32;
    let mut queue = VecDeque::new();
    for seed in 0..dims.len() {
        if labels[seed] != 0 || !inside(seed) {
            continue;
        }
        count += 1;
        labels[seed] = count;
        queue.push_back(seed);
        while let Some(cur) = queue.pop_front() {
            dims.for_each_neighbor(cur, conn, |n| {
                if labels[n] == 0 && inside(n) {
                    labels[n] = count;
                    queue.push_back(n);
                }
            });
        }
    }
    (labels, count as usize)
}

/// Exhaustive validation oracle.
pub mod oracle {
    use super::*;

    /// Default voxel limit for [`oracle_betti_curve`].
    pub const DEFAULT_GUARD: usize = 32 * 32 * 32;

    /// For each distinct positive value `v` in descending order, `(v, β₀{value >= v})`
    /// from a fresh flood fill.
    pub fn oracle_betti_curve(
        p: &Volume,
        conn: Connectivity,
        guard: Option<usize>,
    ) -> Result<Vec<(f64, usize)>> {
        let limit = guard.unwrap_or(DEFAULT_GUARD);
        if p.len() > limit {
            return Err(Error::SizeGuard {
                voxels: p.len(),
                limit,
            });
        }
        let data = p.data();
        let mut levels: Vec<f64> = data.iter().copied().filter(|v| *v != 0.0).collect();
        levels.sort_by(|a, b| b.total_cmp(a));
        levels.dedup();
        Ok(levels
            .into_iter()
            .map(|level| {
                let b = count_components(p.dims(), conn, |i| data[i] != 0.0 && data[i] >= level);
                (level, b)
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::oracle::oracle_betti_curve;
    use super::*;
    use proptest::prelude::*;

    const ISO: [f64; 3] = [1.0, 1.0, 1.0];

    fn line(values: &[f64]) -> Volume {
        Volume::new(Dims::new(1, 1, values.len()), ISO, Role::Probability, values.to_vec()).unwrap()
    }

    fn idx(z: usize) -> VoxelCoord {
        VoxelCoord::new(0, 0, z)
    }

    #[test]
    fn four_voxel_line_pairs() {
        let b = compute_ph0(&line(&[0.9, 0.2, 0.8, 0.1]), Connectivity::TwentySix).unwrap();
        assert_eq!(
            b.pairs(),
            &[
                PersistencePair {
                    birth: 0.9,
                    death: 0.0,
                    birth_voxel: idx(0),
                    death_voxel: None,
                    essential: true
                },
                PersistencePair {
                    birth: 0.8,
                    death: 0.2,
                    birth_voxel: idx(2),
                    death_voxel: Some(idx(1)),
                    essential: false
                },
            ]
        );
    }

    #[test]
    fn all_zero_volume_has_empty_barcode() {
        let v = Volume::filled(Dims::cube(3), ISO, Role::Probability, 0.0).unwrap();
        assert!(compute_ph0(&v, Connectivity::TwentySix).unwrap().is_empty());
    }

    #[test]
    fn single_voxel_is_one_essential_pair() {
        let mut data = vec![0.0; 27];
        data[13] = 0.4;
        let v = Volume::new(Dims::cube(3), ISO, Role::Probability, data).unwrap();
        let b = compute_ph0(&v, Connectivity::TwentySix).unwrap();
        assert_eq!(b.len(), 1);
        let p = b.pairs()[0];
        assert!(p.essential);
        assert_eq!((p.birth, p.death), (0.4, 0.0));
        assert_eq!(p.birth_voxel, VoxelCoord::new(1, 1, 1));
    }

    #[test]
    fn betti_examples() {
        let mut data = vec![0.0; 64];
        data[0] = 0.9;
        data[63] = 0.9;
        let corners = Volume::new(Dims::cube(4), ISO, Role::Probability, data).unwrap();
        assert_eq!(betti0_at(&corners, 0.5, Connectivity::TwentySix).unwrap(), 2);

        let l = line(&[0.9, 0.2, 0.8, 0.1]);
        assert_eq!(betti0_at(&l, 0.5, Connectivity::TwentySix).unwrap(), 2);
        assert_eq!(betti0_at(&l, 0.15, Connectivity::TwentySix).unwrap(), 1);
    }

    #[test]
    fn oracle_examples() {
        let mut data = vec![0.0; 8];
        data[3] = 0.7;
        let single = Volume::new(Dims::cube(2), ISO, Role::Probability, data).unwrap();
        assert_eq!(
            oracle_betti_curve(&single, Connectivity::TwentySix, None).unwrap(),
            vec![(0.7, 1)]
        );
        assert_eq!(
            oracle_betti_curve(&line(&[0.9, 0.2, 0.8, 0.1]), Connectivity::TwentySix, None).unwrap(),
            vec![(0.9, 1), (0.8, 2), (0.2, 1), (0.1, 1)]
        );
        let constant = Volume::filled(Dims::cube(3), ISO, Role::Probability, 0.3).unwrap();
        assert_eq!(
            oracle_betti_curve(&constant, Connectivity::Six, None).unwrap(),
            vec![(0.3, 1)]
        );
    }

    #[test]
    fn oracle_guard() {
        let big = Volume::filled(Dims::cube(33), ISO, Role::Probability, 0.3).unwrap();
        assert!(matches!(
            oracle_betti_curve(&big, Connectivity::Six, None),
            Err(Error::SizeGuard { .. })
        ));
        assert!(oracle_betti_curve(&big, Connectivity::Six, Some(usize::MAX)).is_ok());
    }

    #[test]
    fn connectivity_changes_diagonal_merges() {
        // Two voxels touching only at a corner.
        let mut data = vec![0.0; 8];
        data[0] = 0.9;
        data[7] = 0.8;
        let v = Volume::new(Dims::cube(2), ISO, Role::Probability, data).unwrap();
        assert_eq!(compute_ph0(&v, Connectivity::TwentySix).unwrap().len(), 1);
        assert_eq!(compute_ph0(&v, Connectivity::Eighteen).unwrap().len(), 2);
        assert_eq!(compute_ph0(&v, Connectivity::Six).unwrap().len(), 2);
    }

    #[test]
    fn ties_follow_linear_order() {
        let b = compute_ph0(&line(&[0.5, 0.1, 0.5]), Connectivity::Six).unwrap();
        assert_eq!(b.pairs()[0].birth_voxel, idx(0));
        assert_eq!(b.pairs()[1].birth_voxel, idx(2));
        assert_eq!(b.pairs()[1].death_voxel, Some(idx(1)));
    }

    fn volume_strategy() -> impl Strategy<Value = Volume> {
        (1usize..5, 1usize..5, 1usize..5).prop_flat_map(|(nx, ny, nz)| {
            // Coarse levels force ties and zeros.
            proptest::collection::vec(0u8..6, nx * ny * nz).prop_map(move |levels| {
                let data = levels.into_iter().map(|l| l as f64 / 5.0).collect();
                Volume::new(Dims::new(nx, ny, nz), ISO, Role::Probability, data).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn matches_oracle_with_ties(v in volume_strategy()) {
            let b = compute_ph0(&v, Connectivity::TwentySix).unwrap();
            for (level, betti) in oracle_betti_curve(&v, Connectivity::TwentySix, None).unwrap() {
                prop_assert_eq!(b.betti_at_inclusive(level), betti);
            }
            for pair in b.pairs() {
                prop_assert!(pair.birth >= pair.death);
                prop_assert_eq!(v.get(pair.birth_voxel), pair.birth);
                if let Some(d) = pair.death_voxel {
                    prop_assert!(pair.birth > pair.death);
                    prop_assert_eq!(v.get(d), pair.death);
                }
            }
        }

        #[test]
        fn essential_birth_is_global_max(v in volume_strategy()) {
            let b = compute_ph0(&v, Connectivity::Six).unwrap();
            let max = v.data().iter().copied().fold(0.0, f64::max);
            if max > 0.0 {
                let best = b.pairs().iter().filter(|p| p.essential).map(|p| p.birth).fold(0.0, f64::max);
                prop_assert_eq!(best, max);
                let support = count_components(v.dims(), Connectivity::Six, |i| v.data()[i] > 0.0);
                prop_assert_eq!(b.essential_count(), support);
            } else {
                prop_assert!(b.is_empty());
            }
        }

        #[test]
        fn betti_above_matches_flood_fill(v in volume_strategy(), t in 0.05f64..0.95) {
            let b = compute_ph0(&v, Connectivity::Eighteen).unwrap();
            prop_assert_eq!(b.betti_above(t), betti0_at(&v, t, Connectivity::Eighteen).unwrap());
        }
    }
}
