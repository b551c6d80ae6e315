use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "tubetopo", version, about = "Topology-guided refinement of tubular-structure probability volumes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic vascular-tree case.
    Phantom(PhantomArgs),
    /// Refine a probability volume under the topological loss.
    Refine(RefineArgs),
    /// 0-dimensional superlevel persistence of a volume.
    Ph(PhArgs),
    /// Soft skeleton of a volume.
    Skeletonize(SkeletonizeArgs),
    /// Compare a prediction against a reference mask.
    Metrics(MetricsArgs),
    /// Phantom, refinement and metrics over a list of seeds.
    EvalSuite(EvalSuiteArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Optimizer {
    Adamw,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Conn {
    #[value(name = "6")]
    Six,
    #[value(name = "18")]
    Eighteen,
    #[value(name = "26")]
    TwentySix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PoolingArg {
    Separable3,
    Cubic3,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Grid size as X,Y,Z.
    #[arg(long, value_parser = parse_triple_usize)]
    pub size: Option<[usize; 3]>,
    #[arg(long)]
    pub generations: Option<usize>,
    #[arg(long)]
    pub breaks: Option<usize>,
    #[arg(long)]
    pub blobs: Option<usize>,
    /// Uniform noise amplitude added after blurring.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Voxel spacing in mm as X,Y,Z.
    #[arg(long, value_parser = parse_triple_f64)]
    pub spacing: Option<[f64; 3]>,
    /// Write NIfTI instead of .rvol volumes.
    #[arg(long)]
    pub nifti: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
    /// Start from the refine config recorded in a previous manifest.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long = "prior-beta0")]
    pub prior_beta0: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Last iteration of the dense phase.
    #[arg(long = "t")]
    pub dense_until: Option<usize>,
    /// Number of update iterations.
    #[arg(long = "T")]
    pub total: Option<usize>,
    /// Recomputation interval after the dense phase.
    #[arg(long = "k")]
    pub interval: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum)]
    pub optimizer: Option<Optimizer>,
    #[arg(long = "skeleton-iters")]
    pub skeleton_iters: Option<usize>,
    #[arg(long, value_enum)]
    pub connectivity: Option<Conn>,
}

#[derive(Debug, Args)]
pub struct PhArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print the number of components of {p > P}.
    #[arg(long = "betti-at")]
    pub betti_at: Option<f64>,
    #[arg(long, value_enum, default_value = "26")]
    pub connectivity: Conn,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SkeletonizeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub iters: usize,
    #[arg(long, value_enum, default_value = "separable3")]
    pub pooling: PoolingArg,
    /// Skeletonize {p > 0.5} instead of the raw values.
    #[arg(long)]
    pub binarize: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub centerline: Option<PathBuf>,
    #[arg(long = "nsd-tol", default_value_t = tubetopo::metrics::DEFAULT_NSD_TOLERANCE_MM)]
    pub nsd_tol: f64,
    /// Binarization threshold for non-binary predictions.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long = "case", default_value = "case")]
    pub case_id: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalSuiteArgs {
    /// Comma-separated seeds or an inclusive range such as 0..9.
    #[arg(long, value_parser = parse_seeds)]
    pub seeds: SeedList,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Grid size as X,Y,Z for every case.
    #[arg(long, value_parser = parse_triple_usize)]
    pub size: Option<[usize; 3]>,
    /// Also write refined volumes for every case.
    #[arg(long)]
    pub keep_volumes: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeedList(pub Vec<u64>);

fn parse_seeds(s: &str) -> Result<SeedList, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = a.parse().map_err(|_| format!("bad seed range start in {part:?}"))?;
            let b: u64 = b.trim_start_matches('=').parse().map_err(|_| format!("bad seed range end in {part:?}"))?;
            if b < a {
                return Err(format!("empty seed range {part:?}"));
            }
            out.extend(a..=b);
        } else {
            out.push(part.parse().map_err(|_| format!("bad seed {part:?}"))?);
        }
    }
    if out.is_empty() {
        return Err("no seeds given".into());
    }
    Ok(SeedList(out))
}

fn parse_triple<T: std::str::FromStr>(s: &str) -> Result<[T; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated values, got {s:?}"));
    }
    let mut it = parts.into_iter().map(|p| p.parse::<T>().map_err(|_| format!("bad value {p:?}")));
    Ok([it.next().unwrap()?, it.next().unwrap()?, it.next().unwrap()?])
}

fn parse_triple_usize(s: &str) -> Result<[usize; 3], String> {
    parse_triple(s)
}

fn parse_triple_f64(s: &str) -> Result<[f64; 3], String> {
    parse_triple(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_parse() {
        assert_eq!(parse_seeds("0..3").unwrap().0, vec![0, 1, 2, 3]);
        assert_eq!(parse_seeds("4, 7,1..2").unwrap().0, vec![4, 7, 1, 2]);
        assert!(parse_seeds("3..1").is_err());
        assert!(parse_seeds("").is_err());
        assert!(parse_seeds("x").is_err());
    }

    #[test]
    fn triples_parse() {
        assert_eq!(parse_triple_usize("96,96,64").unwrap(), [96, 96, 64]);
        assert!(parse_triple_usize("96,96").is_err());
        assert_eq!(parse_triple_f64("0.5,0.5,2").unwrap(), [0.5, 0.5, 2.0]);
    }

    #[test]
    fn command_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
