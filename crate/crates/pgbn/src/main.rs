use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pgbn::commands::{self, DEFAULT_CROP};
use pgbn::core::analysis::DropScheme;
use pgbn::core::gradcheck::SuiteModule;

#[derive(Parser)]
#[command(name = "pgbn", version, about = "Position-gated bag-of-local-features networks for 3D volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic planted-lesion dataset.
    SynthGen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model on one fold split of the manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Split index: test on group fold+1, validate on the next group.
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Five-fold cross-validation.
    Crossval {
        #[arg(long)]
        config: PathBuf,
        /// Start fold k from <dir>/fold<k>/model.ckpt.
        #[arg(long)]
        init_from: Option<PathBuf>,
        /// Comma-separated subset of folds (0-based).
        #[arg(long, value_delimiter = ',')]
        folds: Option<Vec<usize>>,
    },
    /// Metrics on a labelled manifest.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value_t = DEFAULT_CROP)]
        crop: usize,
    },
    /// Monte-Carlo gate dropout evaluation.
    McDropout {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_parser = parse_scheme)]
        scheme: DropScheme,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_CROP)]
        crop: usize,
    },
    /// Proportion of gate values above each threshold.
    MaskCurve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "0:1:0.02")]
        thresholds: String,
        #[arg(long)]
        out: PathBuf,
        /// Average over these subjects (required for feature-gated models).
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 72)]
        canonical: usize,
        #[arg(long, default_value_t = DEFAULT_CROP)]
        crop: usize,
    },
    /// Export gate and evidence maps of one volume.
    Evidence {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CROP)]
        crop: usize,
    },
    /// Mean and standard deviation of positive evidence over true positives.
    EvidenceStats {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CROP)]
        crop: usize,
    },
    /// Receptive field, stride and grid of the encoder family.
    RfAudit {
        /// Patch size; all five when omitted.
        #[arg(long, value_parser = ["9", "17", "25", "41", "57"])]
        variant: Option<String>,
        /// Also run the empirical locality probe.
        #[arg(long)]
        probe: bool,
        #[arg(long, default_value_t = DEFAULT_CROP)]
        crop: usize,
    },
    /// Finite-difference gradient checks (64-bit).
    Gradcheck {
        #[arg(long, default_value = "all", value_parser = parse_module)]
        module: SuiteModule,
        #[arg(long, default_value_t = 11)]
        seed: u64,
    },
}

fn parse_scheme(s: &str) -> Result<DropScheme, String> {
    s.parse().map_err(|e: pgbn::core::Error| e.to_string())
}

fn parse_module(s: &str) -> Result<SuiteModule, String> {
    s.parse().map_err(|e: pgbn::core::Error| e.to_string())
}

fn run(cli: Cli) -> pgbn::Result<()> {
    let mut out = std::io::stdout().lock();
    let mut log = std::io::stderr().lock();
    match cli.command {
        Command::SynthGen { spec, out: dir } => commands::synth_gen(&spec, &dir, &mut out),
        Command::Train { config, fold } => commands::train_cmd(&config, fold, &mut out, &mut log).map(drop),
        Command::Crossval {
            config,
            init_from,
            folds,
        } => commands::crossval_cmd(&config, init_from.as_deref(), folds.as_deref(), &mut out, &mut log),
        Command::Eval {
            model,
            manifest,
            threshold,
            crop,
        } => commands::eval_cmd(&model, &manifest, threshold, [crop; 3], &mut out).map(drop),
        Command::McDropout {
            model,
            manifest,
            scheme,
            trials,
            seed,
            crop,
        } => commands::mc_dropout_cmd(&model, &manifest, scheme, trials, seed, [crop; 3], &mut out).map(drop),
        Command::MaskCurve {
            model,
            thresholds,
            out: path,
            manifest,
            canonical,
            crop,
        } => {
            let t = commands::parse_thresholds(&thresholds)?;
            commands::mask_curve_cmd(&model, &t, manifest.as_deref(), [canonical; 3], [crop; 3], &path).map(drop)
        }
        Command::Evidence {
            model,
            volume,
            out: dir,
            crop,
        } => commands::evidence_cmd(&model, &volume, [crop; 3], &dir).map(drop),
        Command::EvidenceStats {
            model,
            manifest,
            out: dir,
            crop,
        } => commands::evidence_stats_cmd(&model, &manifest, [crop; 3], &dir).map(drop),
        Command::RfAudit { variant, probe, crop } => {
            let sizes: Vec<usize> = match variant {
                Some(v) => vec![v.parse().expect("restricted by the parser")],
                None => vec![9, 17, 25, 41, 57],
            };
            commands::rf_audit_cmd(&sizes, probe, [crop; 3], &mut out).map(drop)
        }
        Command::Gradcheck { module, seed } => commands::gradcheck_cmd(module, seed, &mut out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
