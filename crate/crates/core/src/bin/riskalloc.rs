use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use riskalloc::fcap::{build_fcap_lp, partition_table, write_partition_table, PartitionSet};
use riskalloc::harness::{
    dual_stability_study, load_stream, run_experiment, synth_generate, write_campaigns,
    write_impressions, write_report, write_stability, ExperimentConfig, HarnessError, InputSource,
    SynthSpec,
};
use riskalloc::lp::{
    default_p_max, duals_from_instance, sample_instance, DualEstimateOptions, ScaleMode,
};
use riskalloc::model::{CampaignBook, Impression, Micros, PolicyKind, DEFAULT_EPSILON_FLOOR};

/// Online impression allocation with dual-price rules.
#[derive(Parser)]
#[command(name = "riskalloc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic stream and campaign book.
    Synth {
        #[arg(long)]
        seed: u64,
        #[command(flatten)]
        spec: SynthArgs,
        #[arg(long)]
        out_impressions: PathBuf,
        #[arg(long)]
        out_campaigns: PathBuf,
    },
    /// Estimate dual prices from a sample and print `campaign price` lines.
    Duals {
        #[command(flatten)]
        files: FileArgs,
        /// Sampling rate applied to the impressions before solving.
        #[arg(long, default_value_t = 1.0)]
        delta: f64,
        /// Budget scaling fraction.
        #[arg(long, default_value_t = 0.1)]
        eps: f64,
        #[arg(long, value_enum, default_value_t = Scale::EpsOneMinusEps)]
        scale_mode: Scale,
        #[arg(long)]
        p_max: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Add partition frequency-cap rows to the sample LP.
        #[arg(long)]
        fcap_mode: bool,
        #[arg(long, default_value_t = 10)]
        n_bins: usize,
    },
    /// Run a single policy and print its report.
    Run {
        #[arg(long, value_parser = parse_kind)]
        policy: PolicyKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Run several policies on the same stream and print the report.
    Compare {
        #[arg(long)]
        seed: u64,
        /// Comma-separated policy kinds.
        #[arg(long, value_delimiter = ',', value_parser = parse_kind,
              default_value = "zero,linear,log,exponential")]
        policies: Vec<PolicyKind>,
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Solve the sample LP on growing prefixes of a permuted stream.
    Stability {
        #[arg(long)]
        seed: u64,
        /// Comma-separated ascending prefix sizes.
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
        #[arg(long, value_enum, default_value_t = Scale::Eps)]
        scale_mode: Scale,
        #[command(flatten)]
        input: InputArgs,
    },
    /// Print partition caps and the size of the capped sample LP.
    FcapLp {
        #[command(flatten)]
        files: FileArgs,
        #[arg(long, default_value_t = 0.1)]
        eps: f64,
        #[arg(long, value_enum, default_value_t = Scale::EpsOneMinusEps)]
        scale_mode: Scale,
        #[arg(long, default_value_t = 10)]
        n_bins: usize,
        /// Also write the LP as a plain-text listing.
        #[arg(long)]
        listing: Option<PathBuf>,
    },
}

#[derive(Args)]
struct FileArgs {
    #[arg(long)]
    impressions: PathBuf,
    #[arg(long)]
    campaigns: PathBuf,
}

#[derive(Args)]
struct InputArgs {
    /// Impression file; without it a synthetic stream is generated.
    #[arg(long, requires = "campaigns")]
    impressions: Option<PathBuf>,
    #[arg(long, requires = "impressions")]
    campaigns: Option<PathBuf>,
    #[command(flatten)]
    synth: SynthArgs,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 50)]
    synth_campaigns: usize,
    #[arg(long, default_value_t = 40_000)]
    synth_impressions: usize,
    #[arg(long, default_value_t = 0.2)]
    sparsity: f64,
    #[arg(long, default_value_t = 0.0)]
    drift: f64,
    #[arg(long, default_value_t = 0.5)]
    tightness: f64,
    #[arg(long, default_value_t = 5_000)]
    users: usize,
    #[arg(long, default_value_t = 8)]
    segments: usize,
    /// Add a house campaign bidding on every impression.
    #[arg(long)]
    house: bool,
    /// Frequency cap for every campaign.
    #[arg(long)]
    fcap: Option<u32>,
}

impl SynthArgs {
    fn spec(&self) -> SynthSpec {
        SynthSpec {
            campaigns: self.synth_campaigns,
            impressions: self.synth_impressions,
            sparsity: self.sparsity,
            drift: self.drift,
            budget_tightness: self.tightness,
            users: self.users,
            segments: self.segments,
            house: self.house,
            fcap: self.fcap,
        }
    }
}

impl InputArgs {
    fn source(&self) -> InputSource {
        match (&self.impressions, &self.campaigns) {
            (Some(i), Some(c)) => InputSource::Files {
                impressions: i.clone(),
                campaigns: c.clone(),
            },
            _ => InputSource::Synthetic(self.synth.spec()),
        }
    }

    fn load(&self, seed: u64) -> Result<(CampaignBook, Vec<Impression>), HarnessError> {
        match self.source() {
            InputSource::Files {
                impressions,
                campaigns,
            } => load_stream(&impressions, &campaigns),
            InputSource::Synthetic(spec) => synth_generate(&spec, seed),
        }
    }
}

#[derive(Args)]
struct ExperimentArgs {
    /// Sampling rate of the learning window.
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    /// Budget scaling fraction (default: delta |T1| / |T2|).
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long, value_enum, default_value_t = Scale::EpsOneMinusEps)]
    scale_mode: Scale,
    #[arg(long, default_value_t = 1.0)]
    lambda_log: f64,
    #[arg(long, default_value_t = 1.0)]
    kappa: f64,
    #[arg(long)]
    p_max: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_EPSILON_FLOOR)]
    epsilon_floor: f64,
    /// Serve the evaluation window in reverse order.
    #[arg(long)]
    reverse: bool,
    /// Number of rolling periods in the evaluation window.
    #[arg(long)]
    rolling: Option<usize>,
    #[arg(long)]
    fcap_mode: bool,
    #[arg(long, default_value_t = 10)]
    n_bins: usize,
    #[arg(long, default_value_t = 0.5)]
    t1_fraction: f64,
    /// Absolute oob threshold in micros for every campaign.
    #[arg(long)]
    oob_threshold: Option<i64>,
    /// Also solve the full evaluation-window LP for an upper bound.
    #[arg(long)]
    offline_bound: bool,
    #[arg(long, default_value_t = 100)]
    series_every: u64,
    /// File of `campaign price` lines to use instead of estimating prices.
    #[arg(long)]
    duals: Option<PathBuf>,
    /// Directory for report.json, series.csv and decision logs.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scale {
    EpsOneMinusEps,
    Eps,
}

impl From<Scale> for ScaleMode {
    fn from(s: Scale) -> ScaleMode {
        match s {
            Scale::EpsOneMinusEps => ScaleMode::EpsOneMinusEps,
            Scale::Eps => ScaleMode::Eps,
        }
    }
}

fn parse_kind(s: &str) -> Result<PolicyKind, String> {
    s.parse()
}

fn config(
    input: &InputArgs,
    exp: &ExperimentArgs,
    seed: u64,
    policies: Vec<PolicyKind>,
) -> Result<ExperimentConfig, HarnessError> {
    let source = input.source();
    let duals = match &exp.duals {
        Some(path) => {
            let book = match &source {
                InputSource::Files { campaigns, .. } => {
                    riskalloc::harness::load_campaigns(campaigns)?
                }
                InputSource::Synthetic(spec) => synth_generate(spec, seed)?.0,
            };
            Some(read_duals(path, &book)?)
        }
        None => None,
    };
    Ok(ExperimentConfig {
        delta: exp.delta,
        eps: exp.eps,
        scale_mode: exp.scale_mode.into(),
        policies,
        lambda_log: exp.lambda_log,
        kappa: exp.kappa,
        p_max: exp.p_max,
        epsilon_floor: exp.epsilon_floor,
        reverse_stream: exp.reverse,
        rolling: exp.rolling,
        fcap_mode: exp.fcap_mode,
        n_bins: exp.n_bins,
        seed,
        t1_fraction: exp.t1_fraction,
        oob_threshold: exp.oob_threshold.map(Micros),
        offline_bound: exp.offline_bound,
        series_every: exp.series_every,
        duals,
        out_dir: exp.out_dir.clone(),
        ..ExperimentConfig::new(source)
    })
}

/// Reads `campaign price` lines; campaigns not listed get price 0.
fn read_duals(path: &Path, book: &CampaignBook) -> Result<Vec<f64>, HarnessError> {
    let file = File::open(path).map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut prices = vec![0.0; book.len()];
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let n = k + 1;
        let line = line.map_err(|e| HarnessError::Parse {
            line: n,
            msg: e.to_string(),
        })?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (id, p) = body
            .split_once(char::is_whitespace)
            .ok_or_else(|| HarnessError::Parse {
                line: n,
                msg: "expected `campaign price`".into(),
            })?;
        let p: f64 = p.trim().parse().map_err(|_| HarnessError::Parse {
            line: n,
            msg: format!("price `{}` is not a number", p.trim()),
        })?;
        let i = book.index_of(id).ok_or_else(|| HarnessError::Schema {
            line: n,
            msg: format!("unknown campaign `{id}`"),
        })?;
        prices[i] = p;
    }
    Ok(prices)
}

fn create(path: &Path) -> Result<BufWriter<File>, HarnessError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| HarnessError::Io {
            path: path.display().to_string(),
            source,
        })
}

fn out_err(e: io::Error) -> HarnessError {
    HarnessError::Output(e.to_string())
}

fn sample(stream: Vec<Impression>, delta: f64, seed: u64) -> Vec<Impression> {
    use rand::{Rng, SeedableRng};
    if delta >= 1.0 {
        return stream;
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    stream.into_iter().filter(|_| rng.gen_bool(delta)).collect()
}

fn execute(cli: Cli) -> Result<(), HarnessError> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Synth {
            seed,
            spec,
            out_impressions,
            out_campaigns,
        } => {
            let (book, stream) = synth_generate(&spec.spec(), seed)?;
            let mut w = create(&out_campaigns)?;
            write_campaigns(&book, &mut w)
                .and_then(|_| w.flush())
                .map_err(out_err)?;
            let mut w = create(&out_impressions)?;
            write_impressions(&stream, &book, &mut w)
                .and_then(|_| w.flush())
                .map_err(out_err)?;
            writeln!(
                out,
                "{} campaigns, {} impressions",
                book.len(),
                stream.len()
            )
            .map_err(out_err)?;
        }
        Command::Duals {
            files,
            delta,
            eps,
            scale_mode,
            p_max,
            seed,
            fcap_mode,
            n_bins,
        } => {
            if !(delta > 0.0 && delta <= 1.0) {
                return Err(HarnessError::Config(format!(
                    "delta = {delta} must lie in (0, 1]"
                )));
            }
            let (book, stream) = load_stream(&files.impressions, &files.campaigns)?;
            let sample = sample(stream, delta, seed);
            let mode = ScaleMode::from(scale_mode);
            let inst = if fcap_mode {
                let parts = PartitionSet::build(&sample, &book, n_bins)?;
                build_fcap_lp(&sample, &book, eps, mode, &parts)?
            } else {
                sample_instance(&sample, &book, eps, mode)?
            };
            let opts = DualEstimateOptions {
                p_max: Some(p_max.unwrap_or_else(|| default_p_max(&sample))),
                scale_mode: mode,
                ..DualEstimateOptions::new(eps)
            };
            let p = duals_from_instance(&inst, &sample, opts)?;
            for (c, price) in book.campaigns().iter().zip(p.prices()) {
                writeln!(out, "{} {price}", c.id).map_err(out_err)?;
            }
        }
        Command::Run {
            policy,
            seed,
            input,
            exp,
        } => {
            let report = run_experiment(&config(&input, &exp, seed, vec![policy])?)?.report;
            write_report(&report, &mut out)?;
            writeln!(out).map_err(out_err)?;
        }
        Command::Compare {
            seed,
            policies,
            input,
            exp,
        } => {
            let report = run_experiment(&config(&input, &exp, seed, policies)?)?.report;
            write_report(&report, &mut out)?;
            writeln!(out).map_err(out_err)?;
        }
        Command::Stability {
            seed,
            sizes,
            scale_mode,
            input,
        } => {
            let (book, stream) = input.load(seed)?;
            let rows = dual_stability_study(&stream, &book, &sizes, seed, scale_mode.into())?;
            write_stability(&rows, &mut out)?;
        }
        Command::FcapLp {
            files,
            eps,
            scale_mode,
            n_bins,
            listing,
        } => {
            let (book, stream) = load_stream(&files.impressions, &files.campaigns)?;
            let parts = PartitionSet::build(&stream, &book, n_bins)?;
            write_partition_table(&partition_table(&stream, &book, &parts), &mut out)
                .map_err(out_err)?;
            let inst = build_fcap_lp(&stream, &book, eps, scale_mode.into(), &parts)?;
            writeln!(
                out,
                "# {} impressions, {} campaigns, {} cap rows, {} constraints",
                inst.n_impressions(),
                inst.n_campaigns(),
                inst.cap_rows().len(),
                inst.n_constraints()
            )
            .map_err(out_err)?;
            if let Some(path) = listing {
                let mut w = create(&path)?;
                inst.write_listing(&mut w)
                    .and_then(|_| w.flush())
                    .map_err(out_err)?;
            }
        }
    }
    out.flush().map_err(out_err)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
