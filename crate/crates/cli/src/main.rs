//! `star`: distillation runs, loss evaluation and diagnostics from the shell.
//!
//! stdout carries exactly one JSON document on success. Logs and error
//! messages go to stderr. Exit codes: 0 success, 1 usage or config error,
//! 2 numeric failure, 3 I/O error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use log::info;
use serde::Serialize;
use serde_json::json;

use star_core::distill::{gen_synthetic, train_with, write_corpus, DistillConfig, SyntheticConfig, TrainOptions};
use star_core::model::{attention_map, checkpoint, forward_with_trace};
use star_core::numerics::{io, Eager};
use star_core::oracle;
use star_core::starloss::{avg_attention, evaluate, tgm, StarLossConfig, TgmNormalization};
use star_core::StarError;

#[derive(Parser, Debug)]
#[command(name = "star", version, about = "Temporal-relation distillation for Transformer encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Distill a student from a teacher as described by a JSON config.
    Distill {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `out_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the distillation losses between two checkpoints on one input.
    Losses {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        /// STAR tensor of shape input_dim x N.
        #[arg(long)]
        input: PathBuf,
        /// JSON loss config; all terms enabled when absent.
        #[arg(long)]
        loss_config: Option<PathBuf>,
        /// Unnormalized sums, no division by width or sequence length.
        #[arg(long)]
        paper_literal: bool,
    },
    /// Compare backward gradients with central differences.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dump block outputs and head-averaged attention maps as STAR files.
    Trace {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic corpus as STAR files.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time the Gram and attention kernels against the naive loops.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "64,128")]
        sizes: Vec<usize>,
        /// Channel count of the benchmarked features.
        #[arg(long, default_value_t = 64)]
        width: usize,
    },
}

/// Failures, grouped by exit code.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Numeric(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Numeric(_) => 2,
            Failure::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Numeric(m) | Failure::Io(m) => m,
        }
    }
}

impl From<StarError> for Failure {
    fn from(e: StarError) -> Self {
        let msg = e.to_string();
        if e.is_numeric() {
            Failure::Numeric(msg)
        } else if e.is_io() || matches!(e, StarError::Checkpoint(_)) {
            Failure::Io(msg)
        } else {
            Failure::Usage(msg)
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

type Outcome = Result<serde_json::Value, Failure>;

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn to_value<T: Serialize>(v: &T) -> Outcome {
    serde_json::to_value(v).map_err(|e| Failure::Io(e.to_string()))
}

fn distill(config: &Path, out: Option<PathBuf>) -> Outcome {
    let text = fs::read_to_string(config).map_err(|e| Failure::Io(format!("{}: {e}", config.display())))?;
    let mut cfg = DistillConfig::from_json(&text)?;
    if out.is_some() {
        cfg.out_dir = out;
    }
    let opts = TrainOptions::from_env();
    info!("training {} steps on {} thread(s)", cfg.steps, opts.threads);
    let outcome = train_with(&cfg, &opts)?;
    info!(
        "loss {:.6e} -> {:.6e}",
        outcome.initial.total, outcome.final_loss.total
    );
    to_value(&outcome.final_loss)
}

fn losses(
    teacher: &Path,
    student: &Path,
    input: &Path,
    loss_config: Option<&Path>,
    paper_literal: bool,
) -> Outcome {
    let mut cfg = match loss_config {
        Some(p) => read_json::<StarLossConfig>(p)?,
        None => StarLossConfig::with_terms(&star_core::starloss::LossTerm::ALL),
    };
    if paper_literal {
        cfg = cfg.paper_literal();
    }
    cfg.validate()?;
    let t = checkpoint::load(teacher)?;
    let s = checkpoint::load(student)?;
    star_core::distill::check_pair(&t.config, &s.config)?;
    let x = io::load(input)?;
    let tt = forward_with_trace(&t, &x)?;
    let st = forward_with_trace(&s, &x)?;
    to_value(&evaluate(&cfg, &tt, &st)?)
}

fn grad_check(seed: u64) -> Outcome {
    let report = oracle::grad_check_suite(seed)?;
    for c in &report.checks {
        info!("{}: max relative error {:.3e}", c.term, c.max_rel_err);
    }
    if !report.pass {
        let failing: Vec<&str> = report.checks.iter().filter(|c| !c.pass).map(|c| c.term.as_str()).collect();
        println!("{}", serde_json::to_string(&report).map_err(|e| Failure::Io(e.to_string()))?);
        return Err(Failure::Numeric(format!("gradient check failed for {}", failing.join(", "))));
    }
    to_value(&report)
}

fn trace(ckpt: &Path, input: &Path, out: &Path) -> Outcome {
    let w = checkpoint::load(ckpt)?;
    let x = io::load(input)?;
    let t = forward_with_trace(&w, &x)?;
    fs::create_dir_all(out)?;
    let mut features = Vec::new();
    for (l, f) in t.features.iter().enumerate() {
        let name = format!("feature_{l}.star");
        io::save(f, &out.join(&name))?;
        features.push(name);
    }
    let mut maps = Vec::new();
    for (l, heads) in t.attn_maps.iter().enumerate() {
        let name = format!("avg_attn_{}.star", l + 1);
        io::save(&avg_attention(&mut Eager, heads)?, &out.join(&name))?;
        maps.push(name);
    }
    Ok(json!({
        "num_layers": t.num_layers(),
        "seq_len": t.seq_len,
        "width": w.config.width,
        "features": features,
        "avg_attn": maps,
    }))
}

fn gen_data(config: &Path, out: &Path) -> Outcome {
    let cfg: SyntheticConfig = read_json(config)?;
    let corpus = gen_synthetic(&cfg)?;
    let files = write_corpus(&corpus, out)?;
    Ok(json!({
        "sequences": files.len(),
        "shape": [cfg.input_dim, cfg.seq_len],
        "files": files,
    }))
}

/// Best of `reps` wall-clock timings, in milliseconds.
fn time_ms(reps: usize, mut f: impl FnMut()) -> f64 {
    (0..reps)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64() * 1e3
        })
        .fold(f64::INFINITY, f64::min)
}

fn bench(sizes: &[usize], width: usize) -> Outcome {
    if sizes.is_empty() || sizes.contains(&0) || width == 0 {
        return Err(Failure::Usage("sizes and width must be positive".into()));
    }
    let mut rows = Vec::new();
    for &n in sizes {
        let f = oracle::random_tensor(width, n, -1.0, 1.0, n as u64);
        let k = oracle::random_tensor(width, n, -1.0, 1.0, n as u64 + 1);
        let reps = 5;
        let tgm_fast = time_ms(reps, || {
            std::hint::black_box(tgm(&mut Eager, &f, TgmNormalization::None).expect("tgm"));
        });
        let tgm_naive = time_ms(reps, || {
            std::hint::black_box(oracle::naive_tgm(&f));
        });
        let attn_fast = time_ms(reps, || {
            std::hint::black_box(attention_map(&mut Eager, &f, &k).expect("attention"));
        });
        let attn_naive = time_ms(reps, || {
            std::hint::black_box(oracle::naive_attention_map(&f, &k));
        });
        let fast = tgm(&mut Eager, &f, TgmNormalization::None)?;
        let agree = fast.max_abs_diff(&oracle::naive_tgm(&f));
        let attn_agree = attention_map(&mut Eager, &f, &k)?.max_abs_diff(&oracle::naive_attention_map(&f, &k));
        rows.push(json!({
            "n": n,
            "width": width,
            "tgm_fast_ms": tgm_fast,
            "tgm_naive_ms": tgm_naive,
            "tgm_ratio": tgm_naive / tgm_fast,
            "tgm_max_abs_diff": agree,
            "attention_fast_ms": attn_fast,
            "attention_naive_ms": attn_naive,
            "attention_ratio": attn_naive / attn_fast,
            "attention_max_abs_diff": attn_agree,
        }));
    }
    Ok(json!({ "results": rows }))
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Distill { config, out } => distill(&config, out),
        Command::Losses {
            teacher,
            student,
            input,
            loss_config,
            paper_literal,
        } => losses(&teacher, &student, &input, loss_config.as_deref(), paper_literal),
        Command::GradCheck { seed } => grad_check(seed),
        Command::Trace { ckpt, input, out } => trace(&ckpt, &input, &out),
        Command::GenData { config, out } => gen_data(&config, &out),
        Command::Bench { sizes, width } => bench(&sizes, width),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            // help and version go to stdout, errors to stderr
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(value) => {
            println!("{value}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
