//! The `rfalcf` command line.
//!
//! Every subcommand reads one dataset (`--input`, format from the file
//! extension), an optional `key=value` run configuration (`--config`) and
//! writes its artefacts into the `--out` directory. Errors caused by bad
//! arguments or unreadable inputs exit with status 2, failures during
//! computation with status 1.

use std::fs::{self, File};
use std::io::BufWriter;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;

use crate::clustering::{run_protocol, Method, ProtocolConfig};
use crate::data::{corrupt_gaussian, load_matrix, normalize_columns, save_matrix, synth_blobs, LabeledDataset, MatrixFormat};
use crate::solver::{cosine_weights, export_trace, fit};
use crate::{Error, Hyperparams, Result};

#[derive(Debug, Parser)]
#[command(name = "rfalcf", version, about = "RFA-LCF factorization, baselines and clustering evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit RFA-LCF and write the factors and the convergence trace.
    Fit(Common),
    /// Run the clustering protocol over a range of cluster counts.
    Eval(Common),
    /// Write Gaussian-corrupted copies of a dataset, one per variance.
    Corrupt(CorruptArgs),
    /// Export the cosine adjacency and the learned weights, top-k sparsified.
    Graph(GraphArgs),
    /// Generate a labelled synthetic blob dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the `seed` key of the config file.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CorruptArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "0,10,20,30,40,50,60,70,80,90,100")]
    pub variances: Vec<f64>,
    /// Fraction of coordinates per sample that receive noise.
    #[arg(long, default_value_t = 0.3)]
    pub fraction: f64,
    #[arg(long, default_value = "bin")]
    pub format: MatrixFormat,
}

#[derive(Debug, Args)]
pub struct GraphArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 7)]
    pub neighbors: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub dim: usize,
    #[arg(long, default_value_t = 50)]
    pub per_class: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 10.0)]
    pub spread: f64,
    #[arg(long, default_value = "bin")]
    pub format: MatrixFormat,
}

/// Parsed `key=value` run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub params: Hyperparams,
    pub k_range: RangeInclusive<usize>,
    pub restarts: usize,
    pub subset_draws: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
    pub method: Method,
    pub normalize: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let protocol = ProtocolConfig::default();
        Self {
            params: Hyperparams::default(),
            k_range: protocol.k_range,
            restarts: protocol.restarts,
            subset_draws: protocol.subset_draws,
            kmeans_iters: protocol.kmeans_iters,
            seed: protocol.seed,
            method: protocol.method,
            normalize: protocol.normalize,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("line {line}: bad value {value:?} for {key}")))
}

impl RunConfig {
    /// Parses `key=value` lines; `#` starts a comment, blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("line {line}: expected key=value, got {content:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let p = &mut cfg.params;
            match key {
                "alpha" => p.alpha = parse_value(key, value, line)?,
                "beta" => p.beta = parse_value(key, value, line)?,
                "gamma" => p.gamma = parse_value(key, value, line)?,
                "rank" => p.rank = parse_value(key, value, line)?,
                "conv_eps" => p.conv_eps = parse_value(key, value, line)?,
                "conv_relative" => p.conv_relative = parse_value(key, value, line)?,
                "guard_eps" => p.guard_eps = parse_value(key, value, line)?,
                "max_iter" => p.max_iter = parse_value(key, value, line)?,
                "k_range" => cfg.k_range = parse_range(value, line)?,
                "restarts" => cfg.restarts = parse_value(key, value, line)?,
                "subset_draws" => cfg.subset_draws = parse_value(key, value, line)?,
                "kmeans_iters" => cfg.kmeans_iters = parse_value(key, value, line)?,
                "seed" => cfg.seed = parse_value(key, value, line)?,
                "method" => cfg.method = value.parse().map_err(|e: Error| Error::invalid(format!("line {line}: {e}")))?,
                "normalize" => cfg.normalize = parse_value(key, value, line)?,
                other => return Err(Error::invalid(format!("line {line}: unknown key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Checks everything that does not depend on the dataset size.
    pub fn validate(&self) -> Result<()> {
        self.params.validate(usize::MAX)?;
        if *self.k_range.start() < 2 || self.k_range.is_empty() {
            return Err(Error::invalid(format!(
                "k_range must be a non-empty range starting at 2 or more, got {}..{}",
                self.k_range.start(),
                self.k_range.end()
            )));
        }
        if self.restarts == 0 || self.subset_draws == 0 {
            return Err(Error::invalid("restarts and subset_draws must be positive"));
        }
        Ok(())
    }

    pub fn protocol(&self) -> ProtocolConfig {
        ProtocolConfig {
            k_range: self.k_range.clone(),
            subset_draws: self.subset_draws,
            restarts: self.restarts,
            kmeans_iters: self.kmeans_iters,
            method: self.method,
            normalize: self.normalize,
            seed: self.seed,
            ..ProtocolConfig::default()
        }
    }
}

/// Accepts `a..b`, `a..=b` or `a-b`, all inclusive.
fn parse_range(value: &str, line: usize) -> Result<RangeInclusive<usize>> {
    let (lo, hi) = value
        .split_once("..=")
        .or_else(|| value.split_once(".."))
        .or_else(|| value.split_once('-'))
        .ok_or_else(|| Error::invalid(format!("line {line}: bad k_range {value:?}")))?;
    let lo = parse_value("k_range", lo.trim(), line)?;
    let hi = parse_value("k_range", hi.trim(), line)?;
    Ok(lo..=hi)
}

/// Exit status for a command outcome.
pub fn exit_code(result: &Result<()>) -> u8 {
    match result {
        Ok(()) => 0,
        Err(e) if e.is_usage() => 2,
        Err(_) => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit(args) => cmd_fit(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Corrupt(args) => cmd_corrupt(&args),
        Command::Graph(args) => cmd_graph(&args),
        Command::Synth(args) => cmd_synth(&args),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_input(path: &Path) -> Result<LabeledDataset> {
    load_matrix(path, MatrixFormat::from_path(path))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn save_factor(dir: &Path, name: &str, values: DMatrix<f64>) -> Result<()> {
    let path = dir.join(format!("{name}.bin"));
    save_matrix(&LabeledDataset::unlabeled(values, name), &path, MatrixFormat::Bin)
}

fn prepared(dataset: LabeledDataset, cfg: &RunConfig) -> LabeledDataset {
    if cfg.normalize {
        normalize_columns(&dataset)
    } else {
        dataset
    }
}

pub fn cmd_fit(args: &Common) -> Result<()> {
    let cfg = load_config(args)?;
    let data = prepared(load_input(&args.input)?, &cfg).data_matrix()?;
    cfg.params.validate(data.samples())?;
    create_dir(&args.out)?;
    let result = fit(&data, &cfg.params, cfg.seed)?;

    let s = &result.state;
    save_factor(&args.out, "p", s.p.clone())?;
    save_factor(&args.out, "w", s.w.clone())?;
    save_factor(&args.out, "v", s.v.clone())?;
    save_factor(&args.out, "q", s.q.clone())?;
    save_factor(&args.out, "b", DMatrix::from_column_slice(s.b.len(), 1, s.b.as_slice()))?;
    export_trace(&result.trace, create_file(&args.out.join("trace.csv"))?)?;

    let objective = result.trace.last().map_or(f64::NAN, |r| r.breakdown.total);
    println!(
        "iterations={} converged={} objective={objective:e}",
        result.iterations_run, result.converged
    );
    Ok(())
}

pub fn cmd_eval(args: &Common) -> Result<()> {
    let cfg = load_config(args)?;
    let dataset = load_input(&args.input)?;
    create_dir(&args.out)?;
    let report = run_protocol(&dataset, &cfg.params, &cfg.protocol())?;
    report.write_csv(create_file(&args.out.join("eval.csv"))?)?;
    if !report.skipped.is_empty() {
        log::warn!("skipped K values with too few classes: {:?}", report.skipped);
    }
    println!(
        "method={} mean_ac={:.4} std_ac={:.4} best_ac={:.4} mean_f={:.4}",
        cfg.method.name(),
        report.mean_ac,
        report.std_ac,
        report.best_ac,
        report.mean_f
    );
    Ok(())
}

pub fn cmd_corrupt(args: &CorruptArgs) -> Result<()> {
    if args.variances.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::invalid("variances must be finite and nonnegative"));
    }
    if !(0.0..=1.0).contains(&args.fraction) {
        return Err(Error::invalid(format!("fraction must lie in [0, 1], got {}", args.fraction)));
    }
    let dataset = load_input(&args.input)?;
    create_dir(&args.out)?;
    for &variance in &args.variances {
        let noisy = corrupt_gaussian(&dataset, variance, args.fraction, args.seed)?;
        let path = args.out.join(format!("corrupt_v{variance}.{}", args.format.extension()));
        save_matrix(&noisy, &path, args.format)?;
    }
    println!("wrote {} corrupted datasets to {}", args.variances.len(), args.out.display());
    Ok(())
}

/// Keeps the `k` largest off-diagonal entries of each row, zeroing the rest.
pub fn top_k_rows(a: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols());
    for i in 0..a.nrows() {
        let mut cols: Vec<usize> = (0..a.ncols()).filter(|&j| j != i && a[(i, j)] > 0.0).collect();
        cols.sort_by(|&x, &y| a[(i, y)].total_cmp(&a[(i, x)]).then(x.cmp(&y)));
        for &j in cols.iter().take(k) {
            out[(i, j)] = a[(i, j)];
        }
    }
    out
}

pub fn cmd_graph(args: &GraphArgs) -> Result<()> {
    if args.neighbors == 0 {
        return Err(Error::invalid("neighbors must be positive"));
    }
    let cfg = load_config(&args.common)?;
    let dataset = prepared(load_input(&args.common.input)?, &cfg);
    let data = dataset.data_matrix()?;
    cfg.params.validate(data.samples())?;
    create_dir(&args.common.out)?;
    let result = fit(&data, &cfg.params, cfg.seed)?;

    // one row of the adjacency per sample, labelled like the input
    for (name, weights) in [("cosine", cosine_weights(data.values())), ("adaptive_q", result.state.q)] {
        let sparse = top_k_rows(&weights, args.neighbors);
        let export = LabeledDataset::new(sparse.transpose(), dataset.labels.clone(), name)?;
        save_matrix(&export, &args.common.out.join(format!("{name}.csv")), MatrixFormat::Csv)?;
    }
    println!("wrote cosine.csv and adaptive_q.csv with at most {} neighbours per row", args.neighbors);
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let dataset = synth_blobs(args.dim, args.per_class, args.classes, args.spread, args.seed)?;
    create_dir(&args.out)?;
    let path = args.out.join(format!("blobs.{}", args.format.extension()));
    save_matrix(&dataset, &path, args.format)?;
    println!("wrote {} samples of dimension {} to {}", dataset.samples(), args.dim, path.display());
    Ok(())
}
