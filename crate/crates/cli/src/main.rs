//! `mergegrid`: single command-line entry point wiring the checkpoint store,
//! merge engine, grid registry, temporal tools, synthetic trainer, and
//! evaluator into reproducible pipelines.
//!
//! Conventions: machine-readable JSON on stdout, human logs on stderr.
//! Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numeric
//! failure. `MERGEGRID_THREADS` caps internal parallelism; outputs never
//! depend on it.

mod cmd;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "mergegrid",
    version,
    about = "Checkpoint merging and contextual-grid toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a checkpoint's tensor names, shapes, and metadata as JSON
    Inspect {
        /// Checkpoint file (.mgt)
        path: PathBuf,
    },
    /// Run a merge recipe against a grid manifest
    Merge {
        /// Recipe JSON file
        #[arg(long)]
        recipe: PathBuf,
        /// Grid manifest resolving checkpoint ids
        #[arg(long)]
        grid: PathBuf,
        /// Output checkpoint path
        #[arg(long)]
        out: PathBuf,
        /// Drop the additive base term (the literal weighted-sum reading)
        #[arg(long)]
        no_base_term: bool,
    },
    /// Emit per-tensor L1 norms of (checkpoint - base) as CSV
    Norms {
        /// Target checkpoint
        ckpt: PathBuf,
        /// Base checkpoint the delta is taken against
        #[arg(long)]
        base: PathBuf,
        /// Output CSV path (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grid registry operations
    Grid {
        #[command(subcommand)]
        op: GridOp,
    },
    /// Sweep the temporal interpolation coefficient over a lambda grid
    TemporalSweep(TemporalSweepArgs),
    /// Predict per-domain optimal lambda from recency stats (leave-one-out)
    PredictLambda {
        /// CSV with columns domain,avg_gap_days,lambda_star,p_active
        #[arg(long)]
        stats: PathBuf,
        /// Output CSV path (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synthetic data generation and toy training
    Synth {
        #[command(subcommand)]
        op: SynthOp,
    },
    /// Evaluate a checkpoint on a log's test window
    Eval(EvalArgs),
    /// Percent-change report of merged vs baseline metrics
    Report {
        /// JSON map domain -> metric record for the merged model
        #[arg(long)]
        merged: PathBuf,
        /// JSON map domain -> metric record for the baselines
        #[arg(long)]
        baseline: PathBuf,
        /// Output CSV path
        #[arg(long)]
        out: PathBuf,
        /// Selection metric, e.g. ndcg@10
        #[arg(long, default_value = "ndcg@10")]
        selection: String,
    },
    /// Run a JSON experiment file end-to-end
    Pipeline {
        /// Experiment spec (seed, domains, model, merge, sweep)
        #[arg(long)]
        experiment: PathBuf,
        /// Directory all artifacts are written under
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum GridOp {
    /// Register a checkpoint at (domain, phase), or the pretrained base
    Register {
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint file to register
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        domain: Option<String>,
        #[arg(long)]
        phase: Option<String>,
        /// Register as the grid's pretrained base instead of a cell
        #[arg(long)]
        as_base: bool,
        /// Replace an existing cell
        #[arg(long)]
        force: bool,
    },
    /// Print the manifest as JSON
    Ls {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Materialize a base strategy into a checkpoint file
    Resolve {
        #[arg(long)]
        manifest: PathBuf,
        /// pretrained | historical | neutral
        #[arg(long)]
        kind: String,
        /// Historical cell domain
        #[arg(long)]
        domain: Option<String>,
        /// Historical cell phase
        #[arg(long)]
        phase: Option<String>,
        /// Neutral members as domain:phase pairs, comma separated
        #[arg(long)]
        members: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TemporalSweepArgs {
    /// Checkpoint at t1 (the interpolation base)
    #[arg(long)]
    t1: PathBuf,
    /// Checkpoint at t2 (the shift target)
    #[arg(long)]
    t2: PathBuf,
    /// Lambda grid: start:end:step or a comma list
    #[arg(long)]
    lambdas: String,
    /// Events file (JSONL or CSV)
    #[arg(long)]
    log: PathBuf,
    /// Window boundaries t0,t1,t2,test_end in epoch seconds
    /// (defaults to the synthetic layout)
    #[arg(long)]
    boundaries: Option<String>,
    /// Output sweep JSON
    #[arg(long)]
    out: PathBuf,
    /// Groups to evaluate
    #[arg(long, default_value = "all,active,nonactive")]
    groups: String,
    /// Selection metric, e.g. ndcg@10
    #[arg(long, default_value = "ndcg@10")]
    selection: String,
    /// Metric cutoffs
    #[arg(long, default_value = "10,20")]
    ks: String,
    /// Permit lambda beyond the default 2.0 bound
    #[arg(long)]
    allow_wide_extrapolation: bool,
}

#[derive(Subcommand)]
enum SynthOp {
    /// Generate a synthetic interaction log
    Gen {
        /// SynthConfig JSON file
        #[arg(long)]
        config: PathBuf,
        /// Output events JSONL
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one stage of the toy recommender
    Train(TrainArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Events file (JSONL or CSV)
    #[arg(long)]
    log: PathBuf,
    /// Window boundaries t0,t1,t2,test_end in epoch seconds
    #[arg(long)]
    boundaries: Option<String>,
    /// pretrain | p1 | p2
    #[arg(long)]
    stage: String,
    /// Init checkpoint (required for p1/p2)
    #[arg(long)]
    init: Option<PathBuf>,
    /// Output checkpoint path
    #[arg(long)]
    out: PathBuf,
    /// Training seed (required; no silent default)
    #[arg(long)]
    seed: u64,
    /// Domain tag recorded in the checkpoint (defaults to the log's)
    #[arg(long)]
    domain: Option<String>,
    #[arg(long, default_value_t = 8)]
    latent_dim: usize,
    #[arg(long, default_value_t = 10)]
    history_window: usize,
    #[arg(long, default_value_t = 0.1)]
    learning_rate: f32,
    #[arg(long, default_value_t = 3)]
    epochs_pretrain: usize,
    #[arg(long, default_value_t = 2)]
    epochs_incremental: usize,
    #[arg(long, default_value_t = 16)]
    negatives: usize,
    /// Exact softmax over the whole corpus (small fixtures)
    #[arg(long)]
    full_softmax: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate
    #[arg(long)]
    ckpt: PathBuf,
    /// Events file (JSONL or CSV)
    #[arg(long)]
    log: PathBuf,
    /// Window boundaries t0,t1,t2,test_end in epoch seconds
    #[arg(long)]
    boundaries: Option<String>,
    /// Metric cutoffs
    #[arg(long, default_value = "10,20")]
    ks: String,
    /// all | active | nonactive
    #[arg(long, default_value = "all")]
    group: String,
    /// Output metrics JSON (stdout always gets a copy)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluate only each user's last test event
    #[arg(long)]
    per_user_last: bool,
}

fn configure_threads() -> Result<(), cmd::CliError> {
    match std::env::var("MERGEGRID_THREADS") {
        Ok(v) => {
            let n: usize = v.parse().map_err(|_| {
                cmd::CliError::Usage(format!("MERGEGRID_THREADS={v:?} is not a thread count"))
            })?;
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| cmd::CliError::Usage(format!("thread pool: {e}")))
        }
        Err(_) => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version are success paths
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };

    let result = configure_threads().and_then(|()| match cli.command {
        Command::Inspect { path } => cmd::inspect(&path),
        Command::Merge {
            recipe,
            grid,
            out,
            no_base_term,
        } => cmd::merge(&recipe, &grid, &out, no_base_term),
        Command::Norms { ckpt, base, out } => cmd::norms(&ckpt, &base, out.as_deref()),
        Command::Grid { op } => match op {
            GridOp::Register {
                manifest,
                ckpt,
                domain,
                phase,
                as_base,
                force,
            } => cmd::grid_register(&manifest, &ckpt, domain, phase, as_base, force),
            GridOp::Ls { manifest } => cmd::grid_ls(&manifest),
            GridOp::Resolve {
                manifest,
                kind,
                domain,
                phase,
                members,
                out,
            } => cmd::grid_resolve(&manifest, &kind, domain, phase, members, &out),
        },
        Command::TemporalSweep(args) => cmd::temporal_sweep(&args),
        Command::PredictLambda { stats, out } => cmd::predict_lambda(&stats, out.as_deref()),
        Command::Synth { op } => match op {
            SynthOp::Gen { config, out } => cmd::synth_gen(&config, &out),
            SynthOp::Train(args) => cmd::synth_train(&args),
        },
        Command::Eval(args) => cmd::eval(&args),
        Command::Report {
            merged,
            baseline,
            out,
            selection,
        } => cmd::report(&merged, &baseline, &out, &selection),
        Command::Pipeline {
            experiment,
            out_dir,
        } => cmd::pipeline(&experiment, &out_dir),
    });

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.code())
        }
    }
}
