//! Command-line entry points.
//!
//! Exit codes: 0 success, 1 a check or verification failed, 2 usage or
//! runtime error.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_config, Dtype, ModelConfig};
use crate::encoder::{Encoder, Fault};
use crate::error::{Error, Result};
use crate::flops::{closed_form_flops, instrumented_flops, synthetic_frames, FlopMode};
use crate::gradcheck::{run_gradcheck, GradCheckOptions};
use crate::io::{
    checksum_f32, gen_sequence, read_sequence, write_features, write_sequence, FeatureDump,
    Sequence, SequenceKind,
};
use crate::scalar::Scalar;
use crate::tensor::Stage;
use crate::verify::{run_verification, VerifyOptions};

#[derive(Parser)]
#[command(
    name = "streaming-vit",
    version,
    about = "Streaming vision transformer: per-frame encoding with plane-factorized temporal memory"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic input sequence file.
    Gen(GenArgs),
    /// Encode a sequence frame by frame; print checksums, dump features.
    Encode(EncodeArgs),
    /// Run the numeric verification suites.
    Verify(VerifyArgs),
    /// Report per-stage MAC counts from the closed forms.
    Flops(FlopsArgs),
    /// Check analytic layer gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Time frame-by-frame encoding on synthetic input.
    Bench(BenchArgs),
}

#[derive(Args)]
struct ConfigOpts {
    /// Configuration file (key = value lines); omitted for the compact preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the scalar type: f32 or f64.
    #[arg(long)]
    dtype: Option<String>,
    /// Override the memory capacity: a frame count or 'unbounded'.
    #[arg(long)]
    memory: Option<String>,
    /// Override the task mode: frame or sequence.
    #[arg(long)]
    mode: Option<String>,
}

impl ConfigOpts {
    fn resolve(&self) -> Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(path) => parse_config(&std::fs::read_to_string(path)?)?,
            None => ModelConfig::compact(),
        };
        if let Some(d) = &self.dtype {
            cfg.dtype = d.parse()?;
        }
        if let Some(m) = &self.memory {
            cfg.memory_capacity = if m == "unbounded" {
                None
            } else {
                Some(m.parse::<usize>().map_err(|_| {
                    Error::config(format!("--memory wants a frame count or 'unbounded', got '{m}'"))
                })?)
            };
        }
        if let Some(m) = &self.mode {
            cfg.mode = m.parse()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenArgs {
    /// Output path for the sequence file.
    #[arg(long)]
    out: PathBuf,
    /// Content kind: 'noise' or 'blob'.
    #[arg(long, default_value = "blob")]
    kind: String,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct EncodeArgs {
    #[command(flatten)]
    config: ConfigOpts,
    /// Input sequence file.
    #[arg(long)]
    seq: PathBuf,
    /// Where to write the feature dump; omit to only print checksums.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Number of seeds to sweep (0..n).
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Frames per test sequence.
    #[arg(long, default_value_t = 6)]
    frames: usize,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Scalar type the suites run in: f32 or f64.
    #[arg(long, default_value = "f32")]
    dtype: String,
    /// Deliberately break the encoder to prove the suites notice
    /// ('skip-memory-push').
    #[arg(long)]
    inject_fault: Option<String>,
}

#[derive(Args)]
struct FlopsArgs {
    #[command(flatten)]
    config: ConfigOpts,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    /// Cost model: frame, streaming or clip.
    #[arg(long, default_value = "streaming")]
    flop_mode: String,
    /// Also run the instrumented model and compare the tallies.
    #[arg(long)]
    instrumented: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Number of seeds to sweep (0..n).
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Maximum allowed relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    config: ConfigOpts,
    #[arg(long, default_value_t = 8)]
    frames: usize,
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Gen(args) => cmd_gen(&args),
        Command::Encode(args) => cmd_encode(&args),
        Command::Verify(args) => cmd_verify(&args),
        Command::Flops(args) => cmd_flops(&args),
        Command::Gradcheck(args) => cmd_gradcheck(&args),
        Command::Bench(args) => cmd_bench(&args),
    }
}

fn cmd_gen(args: &GenArgs) -> Result<i32> {
    let kind: SequenceKind = args.kind.parse()?;
    let frames = gen_sequence(kind, args.frames, args.height, args.width, args.seed)?;
    for (t, f) in frames.iter().enumerate() {
        println!("frame {t}: checksum {:016x}", checksum_f32(f.data()));
    }
    write_sequence(&args.out, &frames)?;
    println!(
        "wrote {}: {} frames of 3x{}x{} ({kind}, seed {})",
        args.out.display(),
        args.frames,
        args.height,
        args.width,
        args.seed
    );
    Ok(0)
}

fn cmd_encode(args: &EncodeArgs) -> Result<i32> {
    let cfg = args.config.resolve()?;
    let seq = read_sequence(&args.seq)?;
    if seq.height != cfg.image_h || seq.width != cfg.image_w {
        return Err(Error::config(format!(
            "sequence frames are {}x{}, the model wants {}x{}",
            seq.height, seq.width, cfg.image_h, cfg.image_w
        )));
    }
    match cfg.dtype {
        Dtype::F32 => encode_as::<f32>(&cfg, &seq, args.out.as_deref()),
        Dtype::F64 => encode_as::<f64>(&cfg, &seq, args.out.as_deref()),
    }
}

fn encode_as<T: Scalar>(cfg: &ModelConfig, seq: &Sequence, out: Option<&Path>) -> Result<i32> {
    let mut enc = Encoder::<T>::from_config(cfg)?;
    let frames = seq.frames_as::<T>();
    let features = enc.encode_sequence(&frames)?;
    let dump = FeatureDump::from_features(&features)?;
    for (t, rec) in dump.frames.iter().enumerate() {
        println!(
            "frame {t}: tokens {}x{}x{} checksum {:016x}",
            dump.rows,
            dump.cols,
            dump.channels,
            checksum_f32(rec.tokens.data())
        );
    }
    println!(
        "encoded {} frames ({}, {} MACs)",
        dump.frames.len(),
        T::NAME,
        enc.counter().macs()
    );
    if let Some(path) = out {
        write_features(path, &dump)?;
        println!("wrote {}", path.display());
    }
    Ok(0)
}

fn cmd_verify(args: &VerifyArgs) -> Result<i32> {
    let fault = match args.inject_fault.as_deref() {
        None => None,
        Some("skip-memory-push") => Some(Fault::SkipMemoryPush),
        Some(other) => {
            return Err(Error::config(format!(
                "unknown fault '{other}' (available: skip-memory-push)"
            )))
        }
    };
    let options = VerifyOptions {
        seeds: (0..args.seeds).collect(),
        frames: args.frames,
        jobs: args.jobs,
        dtype: args.dtype.parse()?,
        fault,
    };
    let report = run_verification(&options)?;
    print!("{}", report.render());
    if report.passed() {
        println!("verification: all suites passed");
        Ok(0)
    } else {
        println!("verification: FAILED");
        Ok(1)
    }
}

fn cmd_flops(args: &FlopsArgs) -> Result<i32> {
    let cfg = args.config.resolve()?;
    let mode: FlopMode = args.flop_mode.parse()?;
    let closed = closed_form_flops(&cfg, args.frames, mode)?;
    print!("{}", closed.render());
    if !args.instrumented {
        return Ok(0);
    }
    if closed.total_macs() > 20_000_000_000 {
        return Err(Error::config(format!(
            "instrumented run would execute {} MACs; rely on the closed form at this size",
            closed.total_macs()
        )));
    }
    let inst = instrumented_flops(&cfg, args.frames, mode)?;
    let agree = Stage::ALL.iter().all(|s| inst.stage(*s) == closed.stage(*s))
        && inst.elems == closed.elems;
    println!();
    print!("{}", inst.render());
    println!("closed form matches instrumented: {}", if agree { "yes" } else { "NO" });
    Ok(if agree { 0 } else { 1 })
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<i32> {
    let mut worst = 0.0f64;
    for seed in 0..args.seeds {
        let full = run_gradcheck(&GradCheckOptions::micro(seed, false))?;
        let sg = run_gradcheck(&GradCheckOptions::micro(seed, true))?;
        println!(
            "seed {seed}: full max rel {:.3e} ({} coords), stop-gradient max rel {:.3e} ({} coords)",
            full.max_rel, full.coords, sg.max_rel, sg.coords
        );
        worst = worst.max(full.max_rel).max(sg.max_rel);
    }
    let ok = worst <= args.tolerance;
    println!(
        "gradcheck: {} (worst {:.3e}, tolerance {:.0e})",
        if ok { "pass" } else { "FAIL" },
        worst,
        args.tolerance
    );
    Ok(if ok { 0 } else { 1 })
}

fn cmd_bench(args: &BenchArgs) -> Result<i32> {
    let cfg = args.config.resolve()?;
    match cfg.dtype {
        Dtype::F32 => bench_as::<f32>(&cfg, args.frames),
        Dtype::F64 => bench_as::<f64>(&cfg, args.frames),
    }
}

fn bench_as<T: Scalar>(cfg: &ModelConfig, frames: usize) -> Result<i32> {
    if frames == 0 {
        return Err(Error::config("bench needs at least one frame"));
    }
    let inputs = synthetic_frames::<T>(cfg, frames);
    let mut enc = Encoder::<T>::from_config(cfg)?;
    enc.encode_frame(&inputs[0])?;
    enc.reset();
    let start = Instant::now();
    for f in &inputs {
        enc.encode_frame(f)?;
    }
    let dt = start.elapsed();
    let macs = enc.counter().macs();
    let ms = dt.as_secs_f64() * 1e3;
    println!(
        "encoded {frames} frames of 3x{}x{} in {ms:.1} ms ({:.2} ms/frame, {})",
        cfg.image_h,
        cfg.image_w,
        ms / frames as f64,
        T::NAME
    );
    println!(
        "{} MACs, {:.2} GMAC/s",
        macs,
        macs as f64 / dt.as_secs_f64() / 1e9
    );
    Ok(0)
}
