//! `ccdd`: train, sample, evaluate and verify joint continuous-discrete diffusion models.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ccdd_core::checkpoint::{Checkpoint, CheckpointError, NamedTensor};
use ccdd_core::config::{parse_pairs, RunConfig, OUT_DIR_ENV};
use ccdd_core::evaluation::EvalReport;
use ccdd_core::params::Tensor;
use ccdd_core::session::Session;
use ccdd_core::training::StepReport;
use ccdd_core::{theoria, Error};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "ccdd", version, about = "Joint continuous-discrete diffusion language models at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides as `--key=value`; any config key is accepted.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch, or resume when `checkpoint` is set.
    Train(Common),
    /// Draw samples from a trained checkpoint.
    Sample(Common),
    /// Estimate the likelihood bound on held-out data.
    Eval(Common),
    /// Run the theory verification suite.
    Verify(Common),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Domain(_) => 2,
        Error::Input(_) => 3,
        Error::Checkpoint(_) => 4,
        Error::Numeric(_) => 5,
        Error::Io(_) => 6,
    }
}

fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, Error> {
    let mut out = Vec::new();
    let mut it = args.iter().peekable();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            return Err(Error::Config(format!("unexpected argument {a:?}; overrides look like --key=value")));
        };
        let (k, v) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => match it.next_if(|n| !n.starts_with("--")) {
                Some(v) => (flag.to_string(), v.clone()),
                None => return Err(Error::Config(format!("{flag}: missing value"))),
            },
        };
        out.push((k.replace('-', "_"), v));
    }
    Ok(out)
}

/// File, then the output-directory environment variable, then flags.
fn resolve(common: &Common) -> Result<(Vec<(String, String)>, RunConfig), Error> {
    let mut pairs = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Input(format!("cannot read config {}: {e}", p.display())))?;
            parse_pairs(&text)?
        }
        None => Vec::new(),
    };
    if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
        pairs.push(("out_dir".into(), dir));
    }
    pairs.extend(parse_overrides(&common.overrides)?);
    let config = RunConfig::from_pairs(&pairs)?;
    Ok((pairs, config))
}

fn out_dir(config: &RunConfig) -> Result<PathBuf, Error> {
    let dir = PathBuf::from(&config.out_dir);
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn load_checkpoint(config: &RunConfig) -> Result<Checkpoint, Error> {
    if config.checkpoint.is_empty() {
        return Err(CheckpointError::Required.into());
    }
    Checkpoint::load(Path::new(&config.checkpoint))
}

fn train(common: &Common) -> Result<(), Error> {
    let (_, config) = resolve(common)?;
    let dir = out_dir(&config)?;
    let mut session = if config.checkpoint.is_empty() {
        Session::new(config.clone())?
    } else {
        let s = Session::resume(config.clone(), &load_checkpoint(&config)?)?;
        tracing::info!(step = s.step, "resumed");
        s
    };
    fs::write(dir.join("config.txt"), config.to_text())?;
    if let Some(v) = &session.vocabulary {
        fs::write(dir.join("vocab.txt"), v.to_vocab_file())?;
    }
    let metrics_path = dir.join("metrics.csv");
    let mut metrics = if session.step == 0 || !metrics_path.exists() {
        let mut f = fs::File::create(&metrics_path)?;
        writeln!(f, "{}", StepReport::CSV_HEADER)?;
        f
    } else {
        fs::OpenOptions::new().append(true).open(&metrics_path)?
    };
    let ckpt_path = dir.join("checkpoint.ccdd");
    while session.step < config.train_steps {
        let r = session.train_step()?;
        writeln!(metrics, "{}", r.csv_row())?;
        if config.log_every > 0 && (r.step + 1) % config.log_every == 0 {
            tracing::info!(step = r.step + 1, l_cont = r.loss.l_cont, l_disc = r.loss.l_disc, grad_norm = r.grad_norm, "train");
        }
        if config.checkpoint_every > 0 && session.step % config.checkpoint_every == 0 {
            session.to_checkpoint().save(&ckpt_path)?;
        }
    }
    metrics.flush()?;
    session.to_checkpoint().save(&ckpt_path)?;
    println!("trained to step {}; checkpoint at {}", session.step, ckpt_path.display());
    Ok(())
}

fn restore(common: &Common) -> Result<(Session, PathBuf), Error> {
    let (pairs, config) = resolve(common)?;
    let ckpt = load_checkpoint(&config)?;
    let session = Session::from_checkpoint(&ckpt, &pairs)?;
    let dir = out_dir(&session.config)?;
    Ok((session, dir))
}

fn sample(common: &Common) -> Result<(), Error> {
    let (session, dir) = restore(common)?;
    let out = session.sample()?;
    let mut text = String::new();
    for b in 0..out.tokens.batch {
        text.push_str(&session.detokenize(out.tokens.row(b)).replace('\n', "\\n"));
        text.push('\n');
    }
    let path = if session.config.sample_output.is_empty() { dir.join("samples.txt") } else { PathBuf::from(&session.config.sample_output) };
    fs::write(&path, &text)?;
    if session.config.sample_latents {
        let l = &out.latents;
        let dump = Checkpoint {
            config_text: session.config.to_text(),
            config_hash: session.config.model_hash(),
            tensors: vec![NamedTensor { name: "latents".into(), tensor: Tensor { shape: vec![l.batch, l.len, l.dim], data: l.data.clone() } }],
            optimizer_step: 0,
            optimizer_moments: Vec::new(),
            rng_seed: session.config.seed,
            rng_cursor: 0,
            step: session.step,
        };
        dump.save(&dir.join("latents.ccdd"))?;
    }
    print!("{text}");
    if out.forced_unmasks > 0 {
        eprintln!("{} positions were still masked after the last step and were drawn from the clean-token predictions", out.forced_unmasks);
    }
    Ok(())
}

fn eval(common: &Common) -> Result<(), Error> {
    let (mut session, dir) = restore(common)?;
    let report = session.evaluate(session.config.eval_p_r)?;
    let samples = session.sample()?;
    let gen_nll = if samples.tokens.len >= session.config.ngram_order {
        Some(session.generative_nll(&samples.tokens)?)
    } else {
        None
    };
    let mut csv = format!("{},generative_nll\n{},", EvalReport::CSV_HEADER, report.csv_row());
    csv.push_str(&gen_nll.map(|v| format!("{v:.10}")).unwrap_or_default());
    csv.push('\n');
    fs::write(dir.join("eval.csv"), csv)?;
    println!("{}", report.summary());
    if let Some(v) = gen_nll {
        println!("  generative nll {v:.4} nats/token under the {}-gram reference (ppl {:.3})", session.config.ngram_order, v.exp());
    }
    Ok(())
}

fn verify(common: &Common) -> Result<(), Error> {
    let (_, config) = resolve(common)?;
    let dir = out_dir(&config)?;
    let outcome = theoria::verify_suite(config.seed)?;
    let table = outcome.table();
    fs::write(dir.join("verify.txt"), &table)?;
    fs::write(dir.join("verify.csv"), outcome.csv())?;
    print!("{table}");
    if outcome.all_pass() {
        Ok(())
    } else {
        Err(Error::Numeric("verification suite has failing rows".into()))
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(c) => train(c),
        Command::Sample(c) => sample(c),
        Command::Eval(c) => eval(c),
        Command::Verify(c) => verify(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
