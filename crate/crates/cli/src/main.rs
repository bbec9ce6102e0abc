use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ridgealign::losses::Optimizer;
use ridgealign_cli::{
    cmd_eval, cmd_make_gt, cmd_register, cmd_score, cmd_selftest, cmd_synth, cmd_train_toy, CliError,
    RunConfig, TrainToyOptions, EXIT_SELFTEST, EXIT_USAGE,
};

/// Fingerprint registration: semi-dense matching, TPS warping and scoring.
#[derive(Parser)]
#[command(name = "ridgealign", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// RWA1 weight archive; untrained toy weights when absent.
    #[arg(long, global = true)]
    weights: Option<PathBuf>,
    /// Match confidence threshold in (0, 1).
    #[arg(long, global = true)]
    theta: Option<f64>,
    /// Fine window side, odd.
    #[arg(long, global = true)]
    window: Option<usize>,
    /// TPS regularisation, ≥ 0.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Ground-truth grid stride in pixels.
    #[arg(long, global = true, default_value_t = 8)]
    stride: usize,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Opt {
    Sgd,
    Adam,
}

#[derive(Subcommand)]
enum Command {
    /// Register image A onto image B.
    Register {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        mask_a: Option<PathBuf>,
        #[arg(long)]
        mask_b: Option<PathBuf>,
    },
    /// Build grid correspondences from a coarse and a fine field.
    MakeGt { coarse: PathBuf, fine: PathBuf, mask_a: PathBuf, mask_b: PathBuf },
    /// Register every pair of an `a,b,label` manifest and report metrics.
    Eval {
        manifest: PathBuf,
        /// `query,gallery` CSV for rank-1 identification.
        #[arg(long)]
        gallery: Option<PathBuf>,
    },
    /// NCC of two already aligned images.
    Score {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        mask_a: Option<PathBuf>,
        #[arg(long)]
        mask_b: Option<PathBuf>,
    },
    /// Run the invariant and oracle suite.
    Selftest,
    /// Train toy weights on synthetic warped pairs.
    TrainToy {
        #[arg(long, default_value_t = 1)]
        pairs: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 2.0)]
        max_disp: f64,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = ridgealign::losses::TOY_LR)]
        lr: f64,
        #[arg(long, value_enum, default_value_t = Opt::Sgd)]
        optimizer: Opt,
    },
    /// Write a synthetic corpus with an eval manifest.
    Synth {
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 3.0)]
        max_disp: f64,
    },
}

fn run(cli: Cli) -> Result<i32, CliError> {
    let g = cli.global;
    let cfg = RunConfig {
        weights: g.weights,
        theta: g.theta,
        window: g.window,
        lambda: g.lambda,
        stride: g.stride,
        seed: g.seed,
        threads: g.threads,
        out: g.out,
    };
    match cli.command {
        Command::Register { a, b, mask_a, mask_b } => {
            let s = cmd_register(&a, &b, mask_a.as_deref(), mask_b.as_deref(), &cfg)?;
            println!("matches {}  ncc before {:.6}  after {:.6}", s.matches, s.ncc_before, s.ncc_after);
        }
        Command::MakeGt { coarse, fine, mask_a, mask_b } => {
            let gt = cmd_make_gt(&coarse, &fine, &mask_a, &mask_b, &cfg)?;
            println!("{} correspondences", gt.len());
        }
        Command::Eval { manifest, gallery } => {
            let s = cmd_eval(&manifest, gallery.as_deref(), &cfg)?;
            println!(
                "EER {:.6}  ZeroFMR {:.6}  failures {}  genuine NCC {:.6} -> {:.6}",
                s.eer, s.zero_fmr, s.failures, s.mean_genuine_before, s.mean_genuine_after
            );
            if let Some(r) = s.rank1 {
                println!("rank-1 {r:.6}");
            }
        }
        Command::Score { a, b, mask_a, mask_b } => {
            println!("{:.6}", cmd_score(&a, &b, mask_a.as_deref(), mask_b.as_deref(), &cfg)?);
        }
        Command::Selftest => {
            let report = cmd_selftest(&cfg)?;
            print!("{}", report.render());
            if let Some((name, _, _)) = report.lines.iter().find(|l| !l.1) {
                eprintln!("self-test failed: {name}");
                return Ok(EXIT_SELFTEST);
            }
        }
        Command::TrainToy { pairs, size, max_disp, steps, lr, optimizer } => {
            let optimizer = match optimizer {
                Opt::Sgd => Optimizer::Sgd,
                Opt::Adam => Optimizer::Adam,
            };
            let opts = TrainToyOptions { pairs, size, max_disp, steps, lr, optimizer };
            let trace = cmd_train_toy(&opts, &cfg)?;
            if let (Some(a), Some(b)) = (trace.first(), trace.last()) {
                println!("loss {:.6} -> {:.6} over {} steps", a.total, b.total, trace.len());
            }
        }
        Command::Synth { count, size, max_disp } => {
            println!("{}", cmd_synth(count, size, max_disp, &cfg)?.display());
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RIDGEALIGN_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
