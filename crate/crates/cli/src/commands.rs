use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use tubetopo::cubical_ph::{betti0_at, compute_ph0};
use tubetopo::io::{self, export_barcode, export_metrics, export_trajectory, read_volume, write_json, write_volume};
use tubetopo::metrics::{evaluate, MetricConfig, MetricReport};
use tubetopo::phantom::{generate, PhantomConfig};
use tubetopo::pipeline::{run_case, suite_phantom, CaseResult};
use tubetopo::refine::{run, OptimizerMethod, RefineConfig};
use tubetopo::soft_skeleton::{soft_skel, Pooling, SkeletonParams};
use tubetopo::tib_loss::TopoPrior;
use tubetopo::volume::{binarize, Connectivity, Dims, Role, Volume};
use tubetopo::Error;

use crate::args::*;
use crate::manifest::{beside, RunManifest};

/// Environment variable capping `eval-suite` worker threads.
pub const THREADS_ENV: &str = "TOPOSCULPT_THREADS";

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Input(String),
    Numerical(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Input(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }

    /// Single stderr line, `tubetopo: <kind>-error: <message>`.
    pub fn line(&self) -> String {
        let (kind, msg) = match self {
            Failure::Usage(m) => ("usage", m),
            Failure::Input(m) => ("input", m),
            Failure::Numerical(m) => ("numerical", m),
        };
        format!("tubetopo: {kind}-error: {}", msg.replace('\n', " "))
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Numerical { .. } => Failure::Numerical(e.to_string()),
            Error::InvalidParameter(_) | Error::SizeGuard { .. } | Error::Placement(_) => Failure::Usage(e.to_string()),
            _ => Failure::Input(e.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Input(format!("{}: {e}", path.display()))
}

type CmdResult = Result<(), Failure>;

pub fn dispatch(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Phantom(a) => phantom(a),
        Command::Refine(a) => refine(a),
        Command::Ph(a) => ph(a),
        Command::Skeletonize(a) => skeletonize(a),
        Command::Metrics(a) => metrics(a),
        Command::EvalSuite(a) => eval_suite(a),
    }
}

fn connectivity(c: Conn) -> Connectivity {
    match c {
        Conn::Six => Connectivity::Six,
        Conn::Eighteen => Connectivity::Eighteen,
        Conn::TwentySix => Connectivity::TwentySix,
    }
}

fn ensure_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))
}

fn ensure_parent(path: &Path) -> CmdResult {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

fn write_manifest(m: &RunManifest, path: &Path) -> CmdResult {
    ensure_parent(path)?;
    fs::write(path, m.to_json() + "\n").map_err(|e| io_failure(path, e))
}

fn record_input(m: &mut RunManifest, path: &Path) -> CmdResult {
    m.input(path).map_err(|e| io_failure(path, e))
}

fn record_output(m: &mut RunManifest, path: &Path) -> CmdResult {
    m.output(path).map_err(|e| io_failure(path, e))
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

/// Reads a volume as probabilities; binary masks are taken as 0/1 probabilities.
fn read_probability(path: &Path) -> Result<Volume, Failure> {
    let v = read_volume(path)?;
    match v.role() {
        Role::Probability => Ok(v),
        Role::Binary => Ok(v.retag(Role::Probability)?),
        Role::Logit => Err(Failure::Input(format!(
            "{}: values outside [0, 1]; expected a probability volume",
            path.display()
        ))),
    }
}

fn read_mask(path: &Path, threshold: f64) -> Result<Volume, Failure> {
    let v = read_volume(path)?;
    match v.role() {
        Role::Binary => Ok(v),
        Role::Probability => Ok(binarize(&v, threshold)?),
        Role::Logit => Err(Failure::Input(format!(
            "{}: values outside [0, 1]; expected a mask or probability volume",
            path.display()
        ))),
    }
}

fn volume_ext(nifti: bool) -> &'static str {
    if nifti {
        "nii"
    } else {
        "rvol"
    }
}

fn phantom_config(a: &PhantomArgs) -> PhantomConfig {
    let d = PhantomConfig::default();
    PhantomConfig {
        seed: a.seed,
        dims: a.size.map_or(d.dims, |[x, y, z]| Dims::new(x, y, z)),
        spacing: a.spacing.unwrap_or(d.spacing),
        generations: a.generations.unwrap_or(d.generations),
        breaks: a.breaks.unwrap_or(d.breaks),
        blobs: a.blobs.unwrap_or(d.blobs),
        noise: a.noise.unwrap_or(d.noise),
        ..d
    }
}

fn phantom(a: PhantomArgs) -> CmdResult {
    let cfg = phantom_config(&a);
    ensure_dir(&a.out)?;
    let mut m = RunManifest::new("phantom", json!({ "phantom": to_value(&cfg) }));
    let t0 = Instant::now();
    let case = generate(&cfg)?;
    m.time("generate", t0.elapsed().as_secs_f64());

    let t1 = Instant::now();
    let ext = volume_ext(a.nifti);
    let gt = a.out.join(format!("gt.{ext}"));
    let init = a.out.join(format!("init_prob.{ext}"));
    let centerline = a.out.join("centerline.json");
    let corruption = a.out.join("corruption.json");
    write_volume(&case.gt_mask, &gt)?;
    write_volume(&case.init_prob, &init)?;
    io::write_centerline(&case.centerline, &centerline)?;
    write_json(&case.corruption, &corruption)?;
    m.time("write", t1.elapsed().as_secs_f64());
    for p in [&gt, &init, &centerline, &corruption] {
        record_output(&mut m, p)?;
    }
    write_manifest(&m, &a.out.join("manifest.json"))
}

fn refine_config(a: &RefineArgs) -> Result<RefineConfig, Failure> {
    let mut cfg = match &a.config {
        None => RefineConfig::default(),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
            let m = RunManifest::from_json(&text)
                .map_err(|e| Failure::Input(format!("{}: not a run manifest: {e}", path.display())))?;
            let recorded = m
                .config
                .get("refine")
                .ok_or_else(|| Failure::Input(format!("{}: manifest has no refine config", path.display())))?;
            serde_json::from_value(recorded.clone())
                .map_err(|e| Failure::Input(format!("{}: bad refine config: {e}", path.display())))?
        }
    };
    if let Some(n) = a.prior_beta0 {
        cfg.prior = TopoPrior::new(n)?;
    }
    if let Some(x) = a.alpha {
        cfg.weights.alpha = x;
    }
    if let Some(x) = a.beta {
        cfg.weights.beta = x;
    }
    if let Some(x) = a.gamma {
        cfg.weights.gamma = x;
    }
    if let Some(x) = a.dense_until {
        cfg.curriculum.dense_until = x;
    }
    if let Some(x) = a.total {
        cfg.curriculum.total = x;
    }
    if let Some(x) = a.interval {
        cfg.curriculum.interval = x;
    }
    if let Some(x) = a.lr {
        cfg.optimizer.learning_rate = x;
    }
    if let Some(o) = a.optimizer {
        cfg.optimizer.method = match o {
            Optimizer::Adamw => OptimizerMethod::AdamW,
            Optimizer::Sgd => OptimizerMethod::PlainGradient,
        };
    }
    if let Some(k) = a.skeleton_iters {
        cfg.skeleton = SkeletonParams::new(k, cfg.skeleton.pooling)?;
    }
    if let Some(c) = a.connectivity {
        cfg.connectivity = connectivity(c);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn refine(a: RefineArgs) -> CmdResult {
    let cfg = refine_config(&a)?;
    let mut m = RunManifest::new("refine", json!({ "refine": to_value(&cfg) }));
    let t0 = Instant::now();
    let p0 = read_probability(&a.input)?;
    record_input(&mut m, &a.input)?;
    m.time("load", t0.elapsed().as_secs_f64());

    let t1 = Instant::now();
    let result = run(&p0, &cfg);
    m.time("refine", t1.elapsed().as_secs_f64());
    let trajectory = match &result {
        Ok(o) => &o.trajectory,
        Err(f) => &f.trajectory,
    };
    if let Some(path) = &a.trajectory {
        ensure_parent(path)?;
        export_trajectory(trajectory, path)?;
        record_output(&mut m, path)?;
    }
    let manifest_path = a.manifest.clone().unwrap_or_else(|| beside(&a.out));
    let outcome = match result {
        Ok(o) => o,
        Err(f) => {
            write_manifest(&m, &manifest_path)?;
            return Err(f.error.into());
        }
    };
    let t2 = Instant::now();
    ensure_parent(&a.out)?;
    write_volume(&outcome.refined, &a.out)?;
    record_output(&mut m, &a.out)?;
    m.time("write", t2.elapsed().as_secs_f64());
    write_manifest(&m, &manifest_path)
}

fn ph(a: PhArgs) -> CmdResult {
    if a.out.is_none() && a.betti_at.is_none() {
        return Err(Failure::Usage("ph needs --out, --betti-at, or both".into()));
    }
    let conn = connectivity(a.connectivity);
    let mut m = RunManifest::new(
        "ph",
        json!({ "connectivity": to_value(&conn), "betti_at": a.betti_at }),
    );
    let p = read_probability(&a.input)?;
    record_input(&mut m, &a.input)?;
    if let Some(level) = a.betti_at {
        println!("{}", betti0_at(&p, level, conn)?);
    }
    if let Some(out) = &a.out {
        let t0 = Instant::now();
        let barcode = compute_ph0(&p, conn)?;
        m.time("ph", t0.elapsed().as_secs_f64());
        ensure_parent(out)?;
        export_barcode(&barcode, out)?;
        record_output(&mut m, out)?;
        write_manifest(&m, &a.manifest.clone().unwrap_or_else(|| beside(out)))?;
    } else if let Some(path) = &a.manifest {
        write_manifest(&m, path)?;
    }
    Ok(())
}

fn skeletonize(a: SkeletonizeArgs) -> CmdResult {
    let pooling = match a.pooling {
        PoolingArg::Separable3 => Pooling::Separable3,
        PoolingArg::Cubic3 => Pooling::Cubic3,
    };
    let params = SkeletonParams::new(a.iters, pooling)?;
    let mut m = RunManifest::new("skeletonize", json!({ "skeleton": to_value(&params), "binarize": a.binarize }));
    let mut v = read_probability(&a.input)?;
    record_input(&mut m, &a.input)?;
    if a.binarize {
        v = binarize(&v, 0.5)?.retag(Role::Probability)?;
    }
    let t0 = Instant::now();
    let skel = soft_skel(&v, params)?;
    m.time("skeletonize", t0.elapsed().as_secs_f64());
    ensure_parent(&a.out)?;
    write_volume(&skel, &a.out)?;
    record_output(&mut m, &a.out)?;
    write_manifest(&m, &a.manifest.clone().unwrap_or_else(|| beside(&a.out)))
}

fn metrics(a: MetricsArgs) -> CmdResult {
    if !(a.nsd_tol >= 0.0 && a.nsd_tol.is_finite()) {
        return Err(Failure::Usage(format!("--nsd-tol {} must be finite and non-negative", a.nsd_tol)));
    }
    let cfg = MetricConfig {
        nsd_tolerance_mm: a.nsd_tol,
        ..MetricConfig::default()
    };
    let mut m = RunManifest::new("metrics", json!({ "metrics": to_value(&cfg), "threshold": a.threshold }));
    let pred = read_mask(&a.pred, a.threshold)?;
    let gt = read_mask(&a.gt, 0.5)?;
    record_input(&mut m, &a.pred)?;
    record_input(&mut m, &a.gt)?;
    let centerline = match &a.centerline {
        Some(path) => {
            let c = io::read_centerline(path)?;
            c.validate_against(&gt)?;
            record_input(&mut m, path)?;
            Some(c)
        }
        None => None,
    };
    let t0 = Instant::now();
    let report = evaluate(&pred, &gt, centerline.as_ref(), &cfg)?;
    m.time("metrics", t0.elapsed().as_secs_f64());
    ensure_parent(&a.out)?;
    export_metrics([(a.case_id.as_str(), &report)], &a.out)?;
    record_output(&mut m, &a.out)?;
    write_manifest(&m, &a.manifest.clone().unwrap_or_else(|| beside(&a.out)))
}

/// Worker count from [`THREADS_ENV`], defaulting to rayon's choice.
pub fn thread_cap() -> Result<Option<usize>, Failure> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Failure::Usage(format!("{THREADS_ENV}={s:?} is not a positive integer"))),
        },
    }
}

#[derive(Debug, Serialize)]
struct SuiteSummary {
    seeds: Vec<u64>,
    initial_betti0_error: Vec<usize>,
    refined_betti0_error: Vec<usize>,
    mean_initial_betti0_error: f64,
    mean_refined_betti0_error: f64,
    cases_with_refined_error_at_most_1: usize,
    mean_td_gain_pp: f64,
    mean_bd_gain_pp: f64,
    worst_cldice_change: f64,
    mean_refined_cldice: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn summarize(results: &[CaseResult]) -> SuiteSummary {
    SuiteSummary {
        seeds: results.iter().map(|r| r.seed).collect(),
        initial_betti0_error: results.iter().map(|r| r.initial.betti0_error).collect(),
        refined_betti0_error: results.iter().map(|r| r.refined.betti0_error).collect(),
        mean_initial_betti0_error: mean(results.iter().map(|r| r.initial.betti0_error as f64)),
        mean_refined_betti0_error: mean(results.iter().map(|r| r.refined.betti0_error as f64)),
        cases_with_refined_error_at_most_1: results.iter().filter(|r| r.refined.betti0_error <= 1).count(),
        mean_td_gain_pp: mean(results.iter().map(|r| r.refined.td_pct - r.initial.td_pct)),
        mean_bd_gain_pp: mean(results.iter().map(|r| r.refined.bd_pct - r.initial.bd_pct)),
        worst_cldice_change: results
            .iter()
            .map(|r| r.refined.cldice_pct - r.initial.cldice_pct)
            .fold(f64::INFINITY, f64::min),
        mean_refined_cldice: mean(results.iter().map(|r| r.refined.cldice_pct)),
    }
}

fn write_case(dir: &Path, r: &CaseResult, keep_volumes: bool) -> Result<Vec<PathBuf>, Failure> {
    ensure_dir(dir)?;
    let mut written = Vec::new();
    let traj = dir.join("trajectory.csv");
    export_trajectory(&r.trajectory, &traj)?;
    written.push(traj);
    let metrics = dir.join("metrics.csv");
    export_metrics([("init", &r.initial), ("refined", &r.refined)], &metrics)?;
    written.push(metrics);
    let corruption = dir.join("corruption.json");
    write_json(&r.phantom.corruption, &corruption)?;
    written.push(corruption);
    if keep_volumes {
        for (name, v) in [
            ("gt.rvol", &r.phantom.gt_mask),
            ("init_prob.rvol", &r.phantom.init_prob),
            ("refined.rvol", &r.refined_prob),
        ] {
            let p = dir.join(name);
            write_volume(v, &p)?;
            written.push(p);
        }
    }
    Ok(written)
}

fn eval_suite(a: EvalSuiteArgs) -> CmdResult {
    let mut refine_cfg = RefineConfig::default();
    if let Some(x) = a.alpha {
        refine_cfg.weights.alpha = x;
    }
    if let Some(x) = a.beta {
        refine_cfg.weights.beta = x;
    }
    if let Some(x) = a.lr {
        refine_cfg.optimizer.learning_rate = x;
    }
    refine_cfg.validate()?;
    let metric_cfg = MetricConfig::default();
    let phantoms: Vec<PhantomConfig> = a
        .seeds
        .0
        .iter()
        .map(|&s| {
            let c = suite_phantom(s);
            PhantomConfig {
                dims: a.size.map_or(c.dims, |[x, y, z]| Dims::new(x, y, z)),
                ..c
            }
        })
        .collect();
    for p in &phantoms {
        p.validate()?;
    }
    let threads = thread_cap()?;
    ensure_dir(&a.out)?;

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Failure::Usage(format!("cannot start worker pool: {e}")))?;
    let t0 = Instant::now();
    let outcomes: Vec<Result<(CaseResult, Vec<PathBuf>), Failure>> = pool.install(|| {
        phantoms
            .par_iter()
            .map(|p| {
                let r = run_case(p, &refine_cfg, &metric_cfg).map_err(|f| Failure::from(f.error))?;
                let files = write_case(&a.out.join(format!("seed_{}", p.seed)), &r, a.keep_volumes)?;
                Ok((r, files))
            })
            .collect()
    });

    let mut m = RunManifest::new(
        "eval-suite",
        json!({
            "seeds": a.seeds.0,
            "refine": to_value(&refine_cfg),
            "metrics": to_value(&metric_cfg),
            "phantoms": to_value(&phantoms),
            "threads": threads,
        }),
    );
    m.time("suite", t0.elapsed().as_secs_f64());
    let mut results = Vec::new();
    let mut first_failure = None;
    for o in outcomes {
        match o {
            Ok((r, files)) => {
                m.time(&format!("seed_{}/phantom", r.seed), r.timings.phantom_s);
                m.time(&format!("seed_{}/refine", r.seed), r.timings.refine_s);
                m.time(&format!("seed_{}/metrics", r.seed), r.timings.metrics_s);
                for f in &files {
                    record_output(&mut m, f)?;
                }
                results.push(r);
            }
            Err(f) => {
                first_failure.get_or_insert(f);
            }
        }
    }

    let ids: Vec<(String, String)> = results
        .iter()
        .map(|r| (format!("seed_{}/init", r.seed), format!("seed_{}/refined", r.seed)))
        .collect();
    let rows: Vec<(&str, &MetricReport)> = results
        .iter()
        .zip(&ids)
        .flat_map(|(r, (i, f))| [(i.as_str(), &r.initial), (f.as_str(), &r.refined)])
        .collect();
    let csv = a.out.join("metrics.csv");
    export_metrics(rows, &csv)?;
    record_output(&mut m, &csv)?;
    let summary = a.out.join("summary.json");
    write_json(&summarize(&results), &summary)?;
    record_output(&mut m, &summary)?;
    write_manifest(&m, &a.out.join("manifest.json"))?;
    match first_failure {
        Some(f) => Err(f),
        None => Ok(()),
    }
}
