use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use domsel::corpus_io::open_monolingual;
use domsel::diagnostics::{
    chrf2, corpus_bleu, paired_bootstrap, paired_bootstrap_scores, read_scores, write_significance_tsv,
    BootstrapOptions, MetricKind,
};
use domsel::pipeline::{exit_code, RunConfig, Stage, Workspace};
use domsel::{Error, Result};

#[derive(Parser)]
#[command(name = "domsel", version, about = "Embedding-based selection of pseudo in-domain parallel data")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Embed the in-domain and general-domain corpora.
    Embed(RunArgs),
    /// Fit PCA on a sample drawn from both embedding files.
    PcaFit(RunArgs),
    /// Project all embeddings with the fitted PCA model.
    PcaApply(RunArgs),
    /// Top-n cosine search for every in-domain sentence.
    Select(RunArgs),
    /// Write per-rank and stacked sub-corpora.
    Build(RunArgs),
    /// Cosine of each rank's centroid with the test-set centroid.
    Centroids(RunArgs),
    /// Run every stage, skipping those whose outputs are current.
    Pipeline(RunArgs),
    /// Corpus BLEU and chrF2 of a hypothesis file.
    Eval(EvalArgs),
    /// Paired bootstrap significance test between two systems.
    Significance(SignificanceArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    in_domain: Option<PathBuf>,
    #[arg(long)]
    ood_source: Option<PathBuf>,
    #[arg(long)]
    ood_target: Option<PathBuf>,
    #[arg(long)]
    test_set: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// file, hash or bridge.
    #[arg(long)]
    backend: Option<String>,
    /// Command line of the external encoder for the bridge backend.
    #[arg(long)]
    bridge_command: Option<String>,
    /// source or target.
    #[arg(long)]
    compare_side: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    chunk_rows: Option<usize>,
    #[arg(long)]
    pca_out_dims: Option<usize>,
    #[arg(long)]
    dedup: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        let paths = [
            ("in_domain", &self.in_domain),
            ("ood_source", &self.ood_source),
            ("ood_target", &self.ood_target),
            ("test_set", &self.test_set),
            ("out_dir", &self.out_dir),
        ];
        for (key, value) in paths {
            if let Some(p) = value {
                config.set(key, &p.display().to_string())?;
            }
        }
        let strings = [
            ("backend", &self.backend),
            ("bridge.command", &self.bridge_command),
            ("compare_side", &self.compare_side),
        ];
        for (key, value) in strings {
            if let Some(v) = value {
                config.set(key, v)?;
            }
        }
        let numbers = [
            ("search.n", self.n),
            ("search.workers", self.workers),
            ("search.chunk_rows", self.chunk_rows),
            ("pca.out_dims", self.pca_out_dims),
        ];
        for (key, value) in numbers {
            if let Some(v) = value {
                config.set(key, &v.to_string())?;
            }
        }
        if self.dedup {
            config.dedup = true;
        }
        config.apply_overrides(&self.overrides)?;
        Ok(config)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SigMetric {
    Bleu,
    Chrf2,
    /// Mean of externally computed per-sentence scores.
    Scores,
}

#[derive(Args)]
struct SignificanceArgs {
    #[arg(long, value_enum, default_value = "bleu")]
    metric: SigMetric,
    #[arg(long)]
    hyp_a: Option<PathBuf>,
    #[arg(long)]
    hyp_b: Option<PathBuf>,
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    /// Per-sentence scores of system A, one per line.
    #[arg(long)]
    scores_a: Option<PathBuf>,
    #[arg(long)]
    scores_b: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    #[arg(long, value_delimiter = ',', default_value = "100,200,300")]
    sample_sizes: Vec<usize>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "significance.tsv")]
    output: PathBuf,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    open_monolingual(path)?
        .records()?
        .map(|r| r.map(|r| r.source))
        .collect()
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Validation(format!("--{flag} is required for this metric")))
}

fn eval(args: &EvalArgs) -> Result<()> {
    let hyp = read_lines(&args.hyp)?;
    let refs = read_lines(&args.reference)?;
    println!("bleu\t{:.2}", corpus_bleu(&hyp, &refs)?);
    println!("chrf2\t{:.2}", chrf2(&hyp, &refs)?);
    Ok(())
}

enum SigInputs {
    Scores(Vec<f64>, Vec<f64>),
    Text(Vec<String>, Vec<String>, Vec<String>),
}

fn significance(args: &SignificanceArgs) -> Result<()> {
    let mut results = Vec::new();
    let inputs = match args.metric {
        SigMetric::Scores => SigInputs::Scores(
            read_scores(need(&args.scores_a, "scores-a")?)?,
            read_scores(need(&args.scores_b, "scores-b")?)?,
        ),
        SigMetric::Bleu | SigMetric::Chrf2 => SigInputs::Text(
            read_lines(need(&args.hyp_a, "hyp-a")?)?,
            read_lines(need(&args.hyp_b, "hyp-b")?)?,
            read_lines(need(&args.reference, "ref")?)?,
        ),
    };
    for &sample_size in &args.sample_sizes {
        let opts = BootstrapOptions {
            iterations: args.iterations,
            sample_size,
            alpha: args.alpha,
            seed: args.seed,
        };
        let result = match (&inputs, args.metric) {
            (SigInputs::Scores(a, b), _) => paired_bootstrap_scores("scores", a, b, opts)?,
            (SigInputs::Text(a, b, r), SigMetric::Chrf2) => paired_bootstrap(a, b, r, MetricKind::Chrf2, opts)?,
            (SigInputs::Text(a, b, r), _) => paired_bootstrap(a, b, r, MetricKind::Bleu, opts)?,
        };
        println!(
            "{}\tsize={}\tA={:.2}\tB={:.2}\tp={:.4}\tci=[{:.4}, {:.4}]\tsignificant={}",
            result.metric,
            result.sample_size,
            result.score_a,
            result.score_b,
            result.p_value,
            result.ci_low,
            result.ci_high,
            result.significant
        );
        results.push(result);
    }
    write_significance_tsv(&args.output, &results)
}

fn run_stage(args: &RunArgs, stage: Stage) -> Result<()> {
    let mut ws = Workspace::open(args.resolve()?)?;
    ws.run_stage(stage)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Cmd::Embed(a) => run_stage(a, Stage::Embed),
        Cmd::PcaFit(a) => run_stage(a, Stage::PcaFit),
        Cmd::PcaApply(a) => run_stage(a, Stage::PcaApply),
        Cmd::Select(a) => run_stage(a, Stage::Select),
        Cmd::Build(a) => run_stage(a, Stage::Build),
        Cmd::Centroids(a) => run_stage(a, Stage::Centroids),
        Cmd::Pipeline(a) => {
            let mut ws = Workspace::open(a.resolve()?)?;
            let report = ws.run_pipeline()?;
            let names = |s: &[Stage]| s.iter().map(|s| s.name()).collect::<Vec<_>>().join(",");
            println!("executed\t{}", names(&report.executed));
            println!("skipped\t{}", names(&report.skipped));
            Ok(())
        }
        Cmd::Eval(a) => eval(a),
        Cmd::Significance(a) => significance(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
