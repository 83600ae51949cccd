//! `stymam`: train, stylize, visualize scan orders and run the verification
//! suites.
//!
//! Exit codes: 0 ok, 1 verification failure, 2 configuration, 3 data,
//! 4 checkpoint, 5 any other runtime failure.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use stymam::config::{Profile, TrainConfig, SEED_ENV};
use stymam::data;
use stymam::generator::Generator;
use stymam::scan::{Orientation, ScanOrder};
use stymam::training::{self, Trainer};
use stymam::verify::{self, CheckOutcome, GradSuite, Mutation};
use stymam::Error;

#[derive(Parser)]
#[command(name = "stymam", version, about = "Strip-scanning state-space style transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a generator and discriminator from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides both the config file and STYMAM_SEED.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Stylize one image with a trained checkpoint.
    Stylize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resize the input to SIZE x SIZE first (paper profile default 512).
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, default_value = "desk")]
        profile: Profile,
        /// Strip size the checkpoint was trained with, if not the default.
        #[arg(long)]
        strip: Option<usize>,
    },
    /// Write a scan order as `<out>.csv` (t,row,col) and `<out>.pgm`.
    ScanViz {
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        #[arg(long)]
        strip: usize,
        #[arg(long, default_value = "h")]
        orientation: Orientation,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks for one model profile.
    Gradcheck {
        #[arg(long, default_value = "desk")]
        profile: Profile,
    },
    /// Run every oracle, invariant and gradient check.
    Selftest {
        #[arg(long, hide = true)]
        mutate: Option<Mutation>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) => 2,
        Error::Data(_) | Error::Precondition(_) => 3,
        Error::Checkpoint(_) => 4,
        Error::Dimension { .. } | Error::NonFinite { .. } | Error::Io { .. } => 5,
    }
}

/// An error with the exit code it should produce.
struct Failure(u8, Error);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(exit_code(&e), e)
    }
}

fn run_train(config: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg = TrainConfig::from_file(config)?;
    let env = std::env::var(SEED_ENV).ok();
    cfg.apply_seed_overrides(seed, env.as_deref())?;
    let mut trainer = Trainer::from_config(cfg)?;
    let history = trainer.run()?;
    if let Some(last) = history.last() {
        println!("{}", training::METRICS_HEADER);
        println!("{}", last.csv_row());
    }
    println!("wrote {}", trainer.config.out_dir.display());
    Ok(())
}

fn run_stylize(
    checkpoint: &Path,
    input: &Path,
    out: &Path,
    size: Option<usize>,
    profile: Profile,
    strip: Option<usize>,
) -> Result<(), Failure> {
    let mut cfg = profile.generator();
    if let Some(s) = strip {
        cfg.strip_size = s;
    }
    let mut generator = Generator::new(cfg, 0)?;
    training::load_generator(checkpoint, &mut generator).map_err(|e| Failure(4, e))?;
    let img = match size.or(profile.stylize_size()) {
        Some(0) => return Err(Error::Usage("--size must be positive".into()).into()),
        Some(s) => data::load_image_resized(input, s)?,
        None => data::load_image(input)?,
    };
    let (h, w, _) = img.hwc()?;
    let padded = data::pad_to_multiple(&img, 4)?;
    let styled = generator.stylize(&padded)?;
    Ok(data::save_image(out, &data::crop(&styled, h, w)?)?)
}

fn run_scan_viz(
    height: usize,
    width: usize,
    strip: usize,
    orientation: Orientation,
    out: &Path,
) -> Result<(), Failure> {
    let order = ScanOrder::build(height, width, strip, orientation)?;
    let with_ext = |ext: &str| {
        let mut s = out.as_os_str().to_owned();
        s.push(ext);
        PathBuf::from(s)
    };
    let csv = with_ext(".csv");
    let io = |e| Error::Io {
        path: csv.clone(),
        source: e,
    };
    let mut w = BufWriter::new(File::create(&csv).map_err(io)?);
    writeln!(w, "t,row,col").map_err(io)?;
    for t in 0..order.len() {
        let (r, c) = order.cell(t);
        writeln!(w, "{t},{r},{c}").map_err(io)?;
    }
    w.flush().map_err(io)?;

    let last = (order.len() - 1).max(1) as f64;
    let mut pixels = vec![0u8; order.len()];
    for (t, &flat) in order.perm().iter().enumerate() {
        pixels[flat] = (t as f64 * 255.0 / last).round() as u8;
    }
    Ok(data::save_pgm(&with_ext(".pgm"), width, height, &pixels)?)
}

fn report(outcomes: &[CheckOutcome]) -> ExitCode {
    for o in outcomes {
        println!("{o}");
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks passed", outcomes.len());
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", failed.join(", "));
        ExitCode::from(1)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, seed } => run_train(&config, seed),
        Command::Stylize {
            checkpoint,
            input,
            out,
            size,
            profile,
            strip,
        } => run_stylize(&checkpoint, &input, &out, size, profile, strip),
        Command::ScanViz {
            height,
            width,
            strip,
            orientation,
            out,
        } => run_scan_viz(height, width, strip, orientation, &out),
        Command::Gradcheck { profile } => return report(&verify::gradient_suite(&GradSuite::for_profile(profile))),
        Command::Selftest { mutate } => return report(&verify::selftest(mutate)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, e)) => {
            eprintln!("error: {e}");
            ExitCode::from(code)
        }
    }
}
