use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use carve_core::checkpoint::{load_dense, save_dense, Checkpoint, RunInfo};
use carve_core::controllers::Controllers;
use carve_core::corpus::{byte_tokens, synthetic_sources, Corpus, CorpusSpec};
use carve_core::harness::config::{seed_override, RunConfig};
use carve_core::harness::model::LoadedModel;
use carve_core::harness::ppl::eval_ppl;
use carve_core::harness::route::{parse_layers, route_report, ReportFormat};
use carve_core::harness::selftest;
use carve_core::runtime::{export, MoeExport};
use carve_core::trainer::{pretrain, LogRow, Trainer};
use carve_core::{Error, ModelConfig};
use clap::{CommandFactory, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Convert a dense decoder into a fixed-budget mixture of experts.
#[derive(Parser)]
#[command(name = "carve", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train routing controllers against a frozen backbone.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export a trained checkpoint as a mixture-of-experts model.
    Convert {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of calibration windows for the value/output budget.
        #[arg(long, default_value_t = 16)]
        calib: usize,
        /// Calibration text instead of the checkpoint's training corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Perplexity of a dense, checkpoint or exported model on a text file.
    EvalPpl {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Predicted tokens per window; defaults to the context length minus one.
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Per-token expert choices of an exported model, as HTML or ANSI text.
    RouteDump {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        text: PathBuf,
        /// `all`, `last`, or a list such as `0,2` or `1-3`.
        #[arg(long, default_value = "all")]
        layers: String,
        #[arg(long, default_value = "html")]
        format: ReportFormat,
        /// Output file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in consistency checks.
    SelfTest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the synthetic prose, code and instruction corpora.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 360_000)]
        bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            if let Some(Error::Config(msg)) = e.downcast_ref::<Error>() {
                eprintln!("error: invalid configuration: {msg}\n");
                eprintln!("{}", Cli::command().render_usage());
                return ExitCode::from(2);
            }
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> anyhow::Result<ExitCode> {
    match cmd {
        Command::Train { config, out } => train(&config, &out)?,
        Command::Convert {
            ckpt,
            out,
            calib,
            corpus,
        } => convert(&ckpt, &out, calib, corpus.as_deref())?,
        Command::EvalPpl {
            model,
            corpus,
            window,
            threads,
        } => {
            let m = LoadedModel::load(&model).with_context(|| format!("loading {}", model.display()))?;
            let text = fs::read(&corpus).with_context(|| format!("reading {}", corpus.display()))?;
            let window = window.unwrap_or(m.config().max_seq - 1);
            if window == 0 || window > m.config().max_seq {
                bail!("window must be in 1..={}", m.config().max_seq);
            }
            let threads = threads
                .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let ppl = eval_ppl(|t| m.logits(t), &byte_tokens(&text), window, threads)?;
            println!("{ppl:.4}");
        }
        Command::RouteDump {
            model,
            text,
            layers,
            format,
            out,
        } => {
            let ex = MoeExport::load(&model).with_context(|| format!("loading {}", model.display()))?;
            let layers = parse_layers(&layers, ex.cfg().layers)?;
            let bytes = fs::read(&text).with_context(|| format!("reading {}", text.display()))?;
            let report = route_report(&ex, &bytes, &layers)?;
            let rendered = report.render(format);
            match out {
                Some(p) => fs::write(&p, rendered).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{rendered}"),
            }
        }
        Command::SelfTest { seed } => {
            let seed = seed_override()?.unwrap_or(seed);
            let checks = selftest::run(seed);
            for c in &checks {
                println!("{} {:<44} {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail);
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            println!("{} checks, {failed} failed", checks.len());
            if failed > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::GenCorpus { out, bytes, seed } => {
            fs::create_dir_all(&out)?;
            for (name, text) in synthetic_sources(seed, bytes) {
                let p = out.join(format!("{name}.txt"));
                fs::write(&p, text)?;
                println!("{}", p.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn absolute(p: &Path) -> anyhow::Result<PathBuf> {
    fs::canonicalize(p).with_context(|| format!("resolving {}", p.display()))
}

fn train(config: &Path, out: &Path) -> anyhow::Result<()> {
    let mut rc = RunConfig::load(config)?;
    if let Some(seed) = seed_override()? {
        rc = rc.with_seed(seed);
    }
    for c in &mut rc.corpus {
        c.path = absolute(&c.path)?;
    }
    let corpus = rc.load_corpus()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.toml"), rc.to_toml()?)?;
    let cfg = rc.model.clone();

    let started = Instant::now();
    let (dense, pretrained) = match &rc.dense {
        Some(p) => {
            let (dcfg, dense) = load_dense(p).with_context(|| format!("loading {}", p.display()))?;
            let shape = |c: &ModelConfig| (c.layers, c.d_model, c.heads, c.d_mid, c.vocab, c.max_seq);
            if shape(&dcfg) != shape(&cfg) {
                return Err(Error::Config(format!("{} was built for a different model block", p.display())).into());
            }
            (dense, None)
        }
        None => {
            eprintln!("pretraining the dense backbone for {} steps", rc.pretrain.steps);
            let dense = pretrain(&cfg, &rc.pretrain, &corpus, |step, loss| {
                eprintln!("pretrain {step:>6}  loss {loss:.4}  {:.0}s", started.elapsed().as_secs_f64());
            })?;
            save_dense(out.join("dense.bin"), &cfg, &dense)?;
            (dense, Some(rc.pretrain.clone()))
        }
    };

    let controllers = Controllers::init(&cfg, rc.seed)?;
    let mut trainer = Trainer::new(&cfg, &dense, controllers, rc.train.clone())?;
    let mut log = BufWriter::new(File::create(out.join("dynamics.csv"))?);
    writeln!(log, "{}", LogRow::CSV_HEADER)?;
    let mut io_err = None;
    let rows = trainer.run(&corpus, |row| {
        if let Err(e) = writeln!(log, "{}", row.to_csv()).and_then(|_| log.flush()) {
            io_err.get_or_insert(e);
        }
        eprintln!(
            "iter {:>6}  kd {:.4}  r_p {:.4}  r_u {:.4}  r_l {:.4}  ratio {:.3}",
            row.iteration, row.kd, row.r_p, row.r_u, row.r_l, row.active_ratio
        );
    })?;
    if let Some(e) = io_err {
        return Err(e).context("writing dynamics.csv");
    }

    let controllers = trainer.controllers;
    let ck = Checkpoint {
        model: cfg,
        dense,
        controllers,
        run: RunInfo {
            train: rc.train,
            pretrain: pretrained,
            corpus: rc.corpus,
            iterations_done: rows.last().map_or(0, |r| r.iteration),
        },
    };
    ck.save(out.join("tomoe.ckpt"))?;
    eprintln!("wrote {} in {:.0}s", out.join("tomoe.ckpt").display(), started.elapsed().as_secs_f64());
    Ok(())
}

fn convert(ckpt: &Path, out: &Path, calib: usize, text: Option<&Path>) -> anyhow::Result<()> {
    if calib == 0 {
        return Err(Error::Config("--calib must be positive".into()).into());
    }
    let ck = Checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let corpus = match text {
        Some(p) => Corpus::load(&[CorpusSpec {
            path: p.to_path_buf(),
            ratio: 1.0,
        }])?,
        None => Corpus::load(&ck.run.corpus).context("loading the checkpoint's training corpus")?,
    };
    let seed = seed_override()?.unwrap_or(ck.run.train.seed);
    let len = ck.run.train.seq_len.min(corpus.min_source_len());
    if len == 0 {
        bail!("calibration corpus is empty");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let windows = (0..calib)
        .map(|_| corpus.sample_window(&mut rng, len).map(|w| w.1))
        .collect::<Result<Vec<_>, _>>()?;
    let ex = export(&ck.model, &ck.dense, &ck.controllers, &windows)?;
    ex.save(out)?;
    let mut manifest_path = out.as_os_str().to_owned();
    manifest_path.push(".manifest.toml");
    fs::write(&manifest_path, ex.manifest.to_toml()?)?;
    let m = &ex.manifest;
    println!("active ratio        {:.4} (target {})", m.active_ratio, ck.model.target_ratio);
    println!("whole-model ratio   {:.4}", m.whole_model_ratio());
    println!("overhead parameters {}", m.overhead_params);
    for (l, lm) in m.layers.iter().enumerate() {
        println!(
            "layer {l}: expert width {}, value K {}, query/key pairs {}",
            lm.expert_width,
            lm.value_k,
            lm.qk_pairs.len()
        );
    }
    Ok(())
}
