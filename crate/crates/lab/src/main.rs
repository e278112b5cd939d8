use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use icl_pe::analysis::{attack_diagnostics, evaluate_gap, write_gap_csv, GapRecord};
use icl_pe::attack::AttackSpec;
use icl_pe::datagen::{build_dataset, Dataset};
use icl_pe::model::{init_params, Compiled, ModelParams, PeMode};
use icl_pe::rng::{stream, stream_rng};
use icl_pe::train::{train, TrainConfig};
use icl_pe_lab::config::{self, RunConfig};
use icl_pe_lab::selfcheck;
use icl_pe_lab::sweep::{run_sweep, AttackCheck, Cell};
use icl_pe_lab::theory_report::{self, ReportParams};

#[derive(Parser)]
#[command(name = "icl-pe", version, about = "In-context regression with positional encodings: experiments and bounds")]
struct Cli {
    /// `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Single seed; replaces the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Full-size defaults instead of desk defaults.
    #[arg(long, global = true)]
    paper_mode: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a dataset and write it as binary and CSV.
    Gen {
        /// Context length (default: first of `t_list`).
        #[arg(long)]
        t: Option<usize>,
    },
    /// Train one model and write its checkpoint and loss curve.
    Train {
        #[arg(long)]
        t: Option<usize>,
        /// PE mode (default: first of `pe_modes`).
        #[arg(long)]
        pe_mode: Option<String>,
        /// Existing dataset; built from the config when absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Clean and attacked gaps of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Budgets (default: the config's `eps_list`).
        #[arg(long, value_delimiter = ',')]
        eps: Option<Vec<f64>>,
    },
    /// Attack a checkpoint and report the PGD property checks.
    Attack {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_delimiter = ',')]
        eps: Option<Vec<f64>>,
    },
    /// Run the full experiment grid.
    Sweep,
    /// Evaluate every bound expression.
    Theory {
        /// `key = value` bound parameters.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Run the invariant suite.
    Selfcheck,
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn resolve_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut c = config::load(cli.config.as_deref(), cli.paper_mode)?;
    if let Some(out) = &cli.out {
        c.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        c.seeds = vec![seed];
    }
    c.validate()?;
    Ok(c)
}

fn run() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    let config = resolve_config(&cli)?;
    match &cli.command {
        Command::Gen { t } => {
            let t = t.unwrap_or(config.t_list[0]);
            let seed = config.seeds[0];
            let ds = build_dataset(seed, config.n_train, config.n_val, t, config.d, config.dist);
            let dir = output_dir(&config)?;
            let stem = format!("dataset_t{t}_seed{seed}");
            let bin = dir.join(format!("{stem}.bin"));
            ds.write_binary(BufWriter::new(create_new(&bin)?))?;
            ds.write_csv(BufWriter::new(create_new(&dir.join(format!("{stem}.csv")))?))?;
            echo_config(&config, &dir, &stem)?;
            println!("{}", bin.display());
        }
        Command::Train { t, pe_mode, dataset } => {
            let ds = match dataset {
                Some(p) => read_dataset(p)?,
                None => {
                    let t = t.unwrap_or(config.t_list[0]);
                    build_dataset(config.seeds[0], config.n_train, config.n_val, t, config.d, config.dist)
                }
            };
            let mode = match pe_mode {
                Some(m) => PeMode::parse(m)?,
                None => config.pe_modes[0],
            };
            let seed = config.seeds[0];
            let mut rng = stream_rng(seed, stream::INIT);
            let init = init_params(&mut rng, config.d, config.d_m, ds.t, mode, config.pe_init_scale, config.activation);
            let tc = TrainConfig { lr: config.lr, epochs: config.epochs, seed, ..TrainConfig::default() };
            let out = train(ds.train_prompts(), init, &tc)?;
            let dir = output_dir(&config)?;
            let stem = Cell { pe_mode: mode, t: ds.t, seed }.tag();
            let ckpt = dir.join(format!("model_{stem}.bin"));
            out.params.write_checkpoint(BufWriter::new(create_new(&ckpt)?))?;
            out.write_loss_csv(BufWriter::new(create_new(&dir.join(format!("loss_{stem}.csv")))?))?;
            echo_config(&config, &dir, &format!("model_{stem}"))?;
            println!("initial loss {:.6}, final train risk {:.6}", out.initial_loss, out.train_risk());
            println!("{}", ckpt.display());
        }
        Command::Eval { params, dataset, eps } => {
            let (p, ds) = (read_params(params)?, read_dataset(dataset)?);
            let val = ds.val_prompts(config.eval_seed);
            let mut records: Vec<GapRecord> = vec![evaluate_gap(&p, &ds, &val, None)?.record];
            for &e in eps.as_ref().unwrap_or(&config.eps_list).iter().filter(|e| **e > 0.0) {
                records.push(evaluate_gap(&p, &ds, &val, Some(&spec(&config, e)))?.record);
            }
            write_gap_csv(std::io::stdout().lock(), &records, true)?;
        }
        Command::Attack { params, dataset, eps } => {
            let (p, ds) = (read_params(params)?, read_dataset(dataset)?);
            let val = ds.val_prompts(config.eval_seed);
            let c = Compiled::new(&p, ds.t)?;
            let mut out = std::io::stdout().lock();
            writeln!(out, "{}", AttackCheck::CSV_HEADER)?;
            let cell = Cell { pe_mode: p.pe_mode, t: ds.t, seed: ds.seed };
            for &e in eps.as_ref().unwrap_or(&config.eps_list).iter().filter(|e| **e > 0.0) {
                let s = spec(&config, e);
                let eval = evaluate_gap(&p, &ds, &val, Some(&s))?;
                for (split, prompts, attacks) in
                    [("train", ds.train_prompts(), &eval.train_attacks), ("val", &val[..], &eval.val_attacks)]
                {
                    let diag = attack_diagnostics(&c, prompts, attacks, &s, config.lx_safety)?;
                    writeln!(out, "{}", AttackCheck { cell, eps: e, split: split.into(), diag }.to_csv_row())?;
                }
            }
        }
        Command::Sweep => {
            for w in config.warnings() {
                eprintln!("warning: {w}");
            }
            let total = config.pe_modes.len() * config.t_list.len() * config.seeds.len();
            let counter = std::sync::atomic::AtomicUsize::new(0);
            let report = run_sweep(&config, &|r| {
                let k = counter.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
                match &r.failure {
                    None => eprintln!("[{k}/{total}] {} clean gap {:.4}", r.cell.tag(), r.records[0].gap),
                    Some(m) => eprintln!("[{k}/{total}] {} FAILED: {m}", r.cell.tag()),
                }
            })?;
            println!("{}", report.run_dir.display());
            if report.failed() > 0 {
                eprintln!("{} of {total} cells failed", report.failed());
            }
        }
        Command::Theory { params } => {
            let p = match params {
                Some(path) => ReportParams::parse(
                    &std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
                )?,
                None => ReportParams::default(),
            };
            let text = theory_report::render(&theory_report::report(&p));
            let err = theory_report::verify(&text)?;
            if err > 1e-12 {
                bail!("bound report does not re-evaluate: error {err:e}");
            }
            let dir = output_dir(&config)?;
            let path = next_free(&dir, "theory", "csv");
            std::fs::write(&path, &text)?;
            print!("{text}");
            eprintln!("{}", path.display());
        }
        Command::Selfcheck => {
            let checks = selfcheck::run_all(cli.seed.unwrap_or(0));
            print!("{}", selfcheck::render_report(&checks));
            if checks.iter().any(|c| !c.pass) {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn spec(config: &RunConfig, eps: f64) -> AttackSpec {
    AttackSpec { eps, k: config.attack_k, alpha: config.attack_alpha_ratio * eps, freeze_query: config.freeze_query }
}

fn output_dir(config: &RunConfig) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(&config.output_dir)
        .with_context(|| format!("creating {}", config.output_dir.display()))?;
    Ok(config.output_dir.clone())
}

/// Refuses to overwrite earlier results.
fn create_new(path: &Path) -> anyhow::Result<File> {
    File::create_new(path).with_context(|| format!("creating {} (existing results are never overwritten)", path.display()))
}

/// `<stem>.<ext>`, or `<stem>-<n>.<ext>` with the first unused `n`.
fn next_free(dir: &Path, stem: &str, ext: &str) -> PathBuf {
    let first = dir.join(format!("{stem}.{ext}"));
    if !first.exists() {
        return first;
    }
    (2..).map(|n| dir.join(format!("{stem}-{n}.{ext}"))).find(|p| !p.exists()).expect("unbounded")
}

fn echo_config(config: &RunConfig, dir: &Path, stem: &str) -> anyhow::Result<()> {
    std::fs::write(next_free(dir, &format!("{stem}.config"), "txt"), config.to_text())?;
    Ok(())
}

fn read_dataset(path: &Path) -> anyhow::Result<Dataset> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(Dataset::read_binary(BufReader::new(f))?)
}

fn read_params(path: &Path) -> anyhow::Result<ModelParams> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(ModelParams::read_checkpoint(BufReader::new(f))?)
}
