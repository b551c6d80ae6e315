//! Acceptance criteria 1-9. Each test prints one `criterion N: PASS|FAIL` line
//! to stderr (uncaptured) and then asserts.
//!
//! Criteria 6-9 share one full-configuration and one correction-only suite
//! over seeds 0-9 at 96³; expect roughly 15 minutes on one core.

use std::collections::{BTreeSet, VecDeque};
use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use tubetopo::cubical_ph::{compute_ph0, Barcode};
use tubetopo::io::{encode_rvol, metrics_csv, trajectory_csv, Dtype};
use tubetopo::metrics::{evaluate, hd95, surface_within, MetricConfig};
use tubetopo::phantom::{generate, PhantomConfig, PhantomRng};
use tubetopo::pipeline::{run_case, suite_phantom, CaseResult};
use tubetopo::refine::{run, CurriculumConfig, RefineConfig};
use tubetopo::soft_skeleton::SkeletonParams;
use tubetopo::tib_loss::{l_tib_com, l_tib_cor, TibWeights, TopoPrior};
use tubetopo::volume::{Connectivity, Dims, Role, Volume};

const SUITE_SEEDS: std::ops::Range<u64> = 0..10;

fn report(n: u32, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n}: {verdict} ({detail})");
}

fn offsets26() -> Vec<(isize, isize, isize)> {
    let mut out = Vec::new();
    for dz in -1..=1 {
        for dy in -1..=1 {
            for dx in -1..=1 {
                if (dx, dy, dz) != (0, 0, 0) {
                    out.push((dx, dy, dz));
                }
            }
        }
    }
    out
}

/// Components of `inside` by breadth-first search over 26-neighbours.
fn flood_count(dims: Dims, inside: &[bool]) -> usize {
    let offsets = offsets26();
    let mut seen = vec![false; inside.len()];
    let mut count = 0;
    let mut queue = VecDeque::new();
    for start in 0..inside.len() {
        if !inside[start] || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (x, y, z) = (i % dims.nx, (i / dims.nx) % dims.ny, i / (dims.nx * dims.ny));
            for &(dx, dy, dz) in &offsets {
                let (a, b, c) = (x as isize + dx, y as isize + dy, z as isize + dz);
                if a < 0 || b < 0 || c < 0 || a >= dims.nx as isize || b >= dims.ny as isize || c >= dims.nz as isize {
                    continue;
                }
                let j = a as usize + dims.nx * (b as usize + dims.ny * c as usize);
                if inside[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    count
}

fn random_dims(rng: &mut PhantomRng, lo: usize, hi: usize) -> Dims {
    let mut d = || lo + rng.below(hi - lo + 1);
    Dims::new(d(), d(), d())
}

/// Random probability volumes; every other one is quantized to force ties.
fn ph_volumes() -> Vec<Volume> {
    let mut rng = PhantomRng::new(0xACCE_0001);
    (0..200)
        .map(|k| {
            let dims = random_dims(&mut rng, 1, 6);
            let data = (0..dims.len())
                .map(|_| {
                    let u = rng.uniform();
                    if k % 2 == 0 {
                        (u * 10.0).ceil() / 10.0
                    } else {
                        u.max(1e-3)
                    }
                })
                .collect();
            Volume::new(dims, [1.0; 3], Role::Probability, data).unwrap()
        })
        .collect()
}

fn betti_from_barcode(b: &Barcode, level: f64) -> usize {
    b.pairs().iter().filter(|p| p.birth >= level && p.death < level).count()
}

#[test]
fn criterion_1_ph_matches_flood_fill_oracle() {
    let t0 = Instant::now();
    let mut mismatches = 0;
    let mut levels_checked = 0;
    for v in ph_volumes() {
        let b = compute_ph0(&v, Connectivity::TwentySix).unwrap();
        let mut levels: Vec<f64> = v.data().to_vec();
        levels.sort_by(|a, b| b.total_cmp(a));
        levels.dedup();
        for level in levels {
            let inside: Vec<bool> = v.data().iter().map(|x| *x >= level).collect();
            levels_checked += 1;
            if flood_count(v.dims(), &inside) != betti_from_barcode(&b, level) {
                mismatches += 1;
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = mismatches == 0 && secs < 10.0;
    report(1, pass, &format!("{mismatches} mismatches over {levels_checked} thresholds, {secs:.2}s"));
    assert!(pass);
}

#[test]
fn criterion_2_critical_values_are_bit_exact() {
    let mut total = 0;
    let mut bad = 0;
    for v in ph_volumes() {
        let b = compute_ph0(&v, Connectivity::TwentySix).unwrap();
        for p in b.pairs() {
            total += 1;
            let birth_ok = v.get(p.birth_voxel).to_bits() == p.birth.to_bits();
            let death_ok = match p.death_voxel {
                Some(d) => v.get(d).to_bits() == p.death.to_bits(),
                None => p.essential && p.death == 0.0,
            };
            if !(birth_ok && death_ok) {
                bad += 1;
            }
        }
    }
    let pass = bad == 0 && total > 0;
    report(2, pass, &format!("{} of {total} pairs consistent", total - bad));
    assert!(pass);
}

fn distinct_volume(rng: &mut PhantomRng) -> Volume {
    let dims = random_dims(rng, 2, 8);
    let n = dims.len();
    let mut ranks: Vec<usize> = (1..=n).collect();
    for i in (1..n).rev() {
        ranks.swap(i, rng.below(i + 1));
    }
    // Jittered ranks: values stay well separated and persistences stay distinct.
    let data = ranks
        .into_iter()
        .map(|r| (r as f64 + 0.25 + 0.5 * rng.uniform()) / (n + 1) as f64)
        .collect();
    Volume::new(dims, [1.0; 3], Role::Probability, data).unwrap()
}

fn perturbed(v: &Volume, i: usize, delta: f64) -> Volume {
    let mut data = v.data().to_vec();
    data[i] += delta;
    v.with_data(Role::Probability, data).unwrap()
}

#[test]
fn criterion_3_gradients_match_finite_differences() {
    const EPS: f64 = 1e-5;
    let mut rng = PhantomRng::new(0xACCE_0003);
    let mut worst_cor: f64 = 0.0;
    let mut worst_mse: f64 = 0.0;
    let mut checked = 0;
    // The voxel term scales exactly with alpha; unit weight keeps the central
    // difference free of cancellation noise.
    let weights = TibWeights {
        alpha: 1.0,
        beta: 0.0,
        gamma: 0.1,
    };
    let params = SkeletonParams::default();
    for _ in 0..50 {
        let v = distinct_volume(&mut rng);
        let prior = TopoPrior::new(1 + rng.below(3)).unwrap();
        let dims = v.dims();
        let cor = l_tib_cor(&compute_ph0(&v, Connectivity::TwentySix).unwrap(), prior, dims);
        let loss = |p: &Volume| l_tib_cor(&compute_ph0(p, Connectivity::TwentySix).unwrap(), prior, dims).loss;
        for (&i, &g) in &cor.grads {
            let fd = (loss(&perturbed(&v, i, EPS)) - loss(&perturbed(&v, i, -EPS))) / (2.0 * EPS);
            worst_cor = worst_cor.max((fd - g).abs() / g.abs().max(1.0));
            checked += 1;
        }

        let prev_data: Vec<f64> = (0..dims.len()).map(|_| rng.uniform()).collect();
        let prev = v.with_data(Role::Probability, prev_data).unwrap();
        let com = l_tib_com(&v, &prev, weights, params).unwrap();
        let voxel = |p: &Volume| l_tib_com(p, &prev, weights, params).unwrap().voxel;
        for _ in 0..100 {
            let i = rng.below(dims.len());
            let fd = (voxel(&perturbed(&v, i, EPS)) - voxel(&perturbed(&v, i, -EPS))) / (2.0 * EPS);
            let g = com.grad[i];
            worst_mse = worst_mse.max((fd - g).abs() / g.abs().max(1e-3));
        }
    }
    let pass = worst_cor <= 1e-6 && worst_mse <= 1e-6 && checked > 0;
    report(
        3,
        pass,
        &format!("{checked} critical voxels, worst relative error {worst_cor:.2e} (correction), {worst_mse:.2e} (voxel MSE)"),
    );
    assert!(pass);
}

fn random_mask(rng: &mut PhantomRng, dims: Dims, density: f64) -> Volume {
    let mut data: Vec<f64> = (0..dims.len()).map(|_| if rng.uniform() < density { 1.0 } else { 0.0 }).collect();
    if data.iter().all(|x| *x == 0.0) {
        data[rng.below(dims.len())] = 1.0;
    }
    Volume::new(dims, [1.0; 3], Role::Binary, data).unwrap()
}

fn oracle_surface(m: &Volume) -> Vec<usize> {
    let d = m.dims();
    let data = m.data();
    (0..d.len())
        .filter(|&i| {
            if data[i] == 0.0 {
                return false;
            }
            let (x, y, z) = (i % d.nx, (i / d.nx) % d.ny, i / (d.nx * d.ny));
            let faces = [
                (x == 0) || data[i - 1] == 0.0,
                (x + 1 == d.nx) || data[i + 1] == 0.0,
                (y == 0) || data[i - d.nx] == 0.0,
                (y + 1 == d.ny) || data[i + d.nx] == 0.0,
                (z == 0) || data[i - d.nx * d.ny] == 0.0,
                (z + 1 == d.nz) || data[i + d.nx * d.ny] == 0.0,
            ];
            faces.iter().any(|f| *f)
        })
        .collect()
}

fn brute_distances(from: &[usize], to: &[usize], d: Dims, s: [f64; 3]) -> Vec<f64> {
    let xyz = |i: usize| [(i % d.nx) as f64, ((i / d.nx) % d.ny) as f64, (i / (d.nx * d.ny)) as f64];
    from.iter()
        .map(|&a| {
            let pa = xyz(a);
            to.iter()
                .map(|&b| {
                    let pb = xyz(b);
                    (0..3).map(|k| ((pa[k] - pb[k]) * s[k]).powi(2)).sum::<f64>().sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn oracle_hd95(mut d: Vec<f64>) -> f64 {
    d.sort_by(f64::total_cmp);
    let pos = 0.95 * (d.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    d[lo] + (d[hi] - d[lo]) * (pos - lo as f64)
}

fn perfect_suite() -> Result<(), String> {
    for seed in 0..3 {
        let cfg = PhantomConfig {
            dims: Dims::new(48, 48, 64),
            seed,
            generations: 2,
            root_radius: 4.0,
            branch_length: tubetopo::phantom::Range::new(14.0, 18.0),
            breaks: 0,
            blobs: 0,
            ..PhantomConfig::default()
        };
        let case = generate(&cfg).map_err(|e| e.to_string())?;
        let r = evaluate(&case.gt_mask, &case.gt_mask, Some(&case.centerline), &MetricConfig::default())
            .map_err(|e| e.to_string())?;
        let ok = r.cldice_pct == 100.0
            && r.nsdice_pct == 100.0
            && r.hd95_mm == 0.0
            && r.td_pct == 100.0
            && r.bd_pct == 100.0
            && r.betti0_error == 0;
        if !ok {
            return Err(format!("seed {seed}: {r:?}"));
        }
    }
    Ok(())
}

#[test]
fn criterion_4_metrics_match_brute_force() {
    let mut rng = PhantomRng::new(0xACCE_0004);
    let spacings = [0.5, 1.0, 1.5, 2.0];
    let mut worst_hd: f64 = 0.0;
    let mut set_mismatches = 0;
    for _ in 0..50 {
        let dims = random_dims(&mut rng, 1, 8);
        let spacing = [spacings[rng.below(4)], spacings[rng.below(4)], spacings[rng.below(4)]];
        let tol = [0.5, 1.0, 1.5, 2.0][rng.below(4)];
        let density = 0.2 + 0.5 * rng.uniform();
        let pred = random_mask(&mut rng, dims, density).with_spacing(spacing).unwrap();
        let gt = random_mask(&mut rng, dims, density).with_spacing(spacing).unwrap();

        let (sp, sg) = (oracle_surface(&pred), oracle_surface(&gt));
        let d_pg = brute_distances(&sp, &sg, dims, spacing);
        let d_gp = brute_distances(&sg, &sp, dims, spacing);
        let mut pooled = d_pg.clone();
        pooled.extend(&d_gp);
        let expect = oracle_hd95(pooled);
        worst_hd = worst_hd.max((hd95(&pred, &gt, spacing).unwrap() - expect).abs());

        let within = |s: &[usize], d: &[f64]| -> BTreeSet<usize> {
            s.iter().zip(d).filter(|(_, d)| **d <= tol).map(|(i, _)| *i).collect()
        };
        let got_pg: BTreeSet<usize> = surface_within(&pred, &gt, tol, spacing).unwrap().into_iter().collect();
        let got_gp: BTreeSet<usize> = surface_within(&gt, &pred, tol, spacing).unwrap().into_iter().collect();
        if got_pg != within(&sp, &d_pg) || got_gp != within(&sg, &d_gp) {
            set_mismatches += 1;
        }
    }
    let perfect = perfect_suite();
    let pass = worst_hd <= 1e-12 && set_mismatches == 0 && perfect.is_ok();
    report(
        4,
        pass,
        &format!(
            "hd95 max deviation {worst_hd:.1e}, {set_mismatches} NSD set mismatches, perfect suite {}",
            perfect.as_ref().map_or_else(|e| e.clone(), |_| "ok".into())
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5_curriculum_recomputes_51_times() {
    let dims = Dims::cube(10);
    let v = Volume::from_fn(dims, [1.0; 3], Role::Probability, |c| {
        let tube = (4..=5).contains(&c.x) && (4..=5).contains(&c.y) && c.z != 5;
        if tube {
            0.9
        } else {
            0.1 + 0.01 * ((c.x + 3 * c.y + 7 * c.z) % 5) as f64
        }
    })
    .unwrap();
    let cfg = RefineConfig {
        curriculum: CurriculumConfig {
            dense_until: 30,
            total: 90,
            interval: 3,
        },
        ..RefineConfig::default()
    };
    let out = run(&v, &cfg).unwrap();
    let flags = out.trajectory.iter().filter(|r| r.ph_recomputed).count();
    let dense = out.trajectory.iter().filter(|r| r.ph_recomputed && r.iteration <= 30).count();
    let pass = flags == 51 && dense == 31;
    report(5, pass, &format!("{flags} recomputations ({dense} dense, {} sampled)", flags - dense));
    assert!(pass);
}

struct Suites {
    full: Vec<CaseResult>,
    ablation: Vec<CaseResult>,
}

fn suites() -> &'static Suites {
    static SUITES: OnceLock<Suites> = OnceLock::new();
    SUITES.get_or_init(|| {
        let full_cfg = RefineConfig::default();
        let ablation_cfg = RefineConfig {
            weights: TibWeights {
                alpha: 0.0,
                beta: 0.0,
                ..full_cfg.weights
            },
            ..full_cfg
        };
        let metrics = MetricConfig::default();
        let run_all = |cfg: &RefineConfig| -> Vec<CaseResult> {
            SUITE_SEEDS
                .map(|seed| run_case(&suite_phantom(seed), cfg, &metrics).expect("suite case runs"))
                .collect()
        };
        Suites {
            full: run_all(&full_cfg),
            ablation: run_all(&ablation_cfg),
        }
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_6_betti_error_is_corrected() {
    let s = suites();
    let init: Vec<usize> = s.full.iter().map(|r| r.initial.betti0_error).collect();
    let fin: Vec<usize> = s.full.iter().map(|r| r.refined.betti0_error).collect();
    let mean_init = mean(init.iter().map(|x| *x as f64));
    let mean_fin = mean(fin.iter().map(|x| *x as f64));
    let reduction = 100.0 * (1.0 - mean_fin / mean_init);
    let good = fin.iter().filter(|e| **e <= 1).count();
    let slowest = s.full.iter().map(|r| r.timings.refine_s).fold(0.0, f64::max);
    let pass = mean_init >= 6.0 && good >= 8 && reduction >= 80.0 && slowest <= 900.0;
    report(
        6,
        pass,
        &format!(
            "initial {init:?} (mean {mean_init:.1}), refined {fin:?} (mean {mean_fin:.1}), {good}/10 at most 1, reduction {reduction:.1}%, slowest refine {slowest:.0}s"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_completeness_improves() {
    let s = suites();
    let td_gain = mean(s.full.iter().map(|r| r.refined.td_pct - r.initial.td_pct));
    let bd_gain = mean(s.full.iter().map(|r| r.refined.bd_pct - r.initial.bd_pct));
    let cl_changes: Vec<f64> = s.full.iter().map(|r| r.refined.cldice_pct - r.initial.cldice_pct).collect();
    let worst = cl_changes.iter().copied().fold(f64::INFINITY, f64::min);
    let pass = td_gain >= 5.0 && bd_gain >= 5.0 && worst >= -1.0;
    report(
        7,
        pass,
        &format!("mean TD gain {td_gain:.2} pp, mean BD gain {bd_gain:.2} pp, worst clDice change {worst:.2}"),
    );
    assert!(pass);
}

#[test]
fn criterion_8_integrity_term_helps() {
    let s = suites();
    let full = mean(s.full.iter().map(|r| r.refined.cldice_pct));
    let ablation = mean(s.ablation.iter().map(|r| r.refined.cldice_pct));
    let pass = full - ablation > 0.0;
    report(
        8,
        pass,
        &format!("mean clDice full {full:.3}, correction-only {ablation:.3}, difference {:.3}", full - ablation),
    );
    assert!(pass);
}

#[test]
fn criterion_9_runs_are_deterministic() {
    let first = &suites().full[0];
    let again = run_case(&suite_phantom(first.seed), &RefineConfig::default(), &MetricConfig::default()).unwrap();
    let bytes = |r: &CaseResult| encode_rvol(&r.refined_prob, Dtype::F64).unwrap();
    let csv = |r: &CaseResult| metrics_csv([("init", &r.initial), ("refined", &r.refined)]);
    let same_volume = bytes(first) == bytes(&again);
    let same_traj = trajectory_csv(&first.trajectory) == trajectory_csv(&again.trajectory);
    let same_metrics = csv(first) == csv(&again);
    let pass = same_volume && same_traj && same_metrics;
    report(
        9,
        pass,
        &format!("volume identical {same_volume}, trajectory identical {same_traj}, metrics identical {same_metrics}"),
    );
    assert!(pass);
}
