use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use hdmnet::config::{RunConfig, SEED_ENV};
use hdmnet::episodes::{generate_class_bank, indexed_episode, Episode};
use hdmnet::gradcheck::TOLERANCE;
use hdmnet::gradsuite::run_suite;
use hdmnet::metrics::{evaluate, EvalSpec, OraclePredictor, Predictor};
use hdmnet::train::{load_model, train_with, training_pool, write_outputs};
use hdmnet::{pnm, HdmNet};

#[derive(Parser)]
#[command(name = "hdmnet", version, about = "Few-shot segmentation with hierarchically decoupled matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a `key = value` config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's `checkpoint` path.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides the config's `log` path.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Mean IoU of a checkpoint over held-out-class episodes.
    Eval {
        #[arg(long, required_unless_present = "oracle")]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, env = SEED_ENV, default_value_t = 0)]
        seed: u64,
        /// Data settings (class bank, split, image size); defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Score the ground truth instead of a model.
        #[arg(long, conflicts_with = "ckpt")]
        oracle: bool,
    },
    /// Run the finite-difference gradient suite.
    GradCheck {
        #[arg(long, env = SEED_ENV, default_value_t = 0)]
        seed: u64,
    },
    /// Write per-stage correlation heatmaps for one held-out-class episode.
    DumpCorr {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, env = SEED_ENV, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Export sample episodes as P6 images and P5 masks.
    MakeData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        episodes: usize,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, env = SEED_ENV, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

fn data_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_file(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn cmd_train(config: &Path, checkpoint: Option<PathBuf>, log: Option<PathBuf>) -> Result<()> {
    let mut cfg = RunConfig::from_file(config).with_context(|| format!("reading config {}", config.display()))?;
    cfg.checkpoint = checkpoint.or(cfg.checkpoint);
    cfg.log = log.or(cfg.log);
    let pool = training_pool(&cfg)?;
    let every = (cfg.steps / 20).max(1);
    let outcome = train_with(&cfg, &pool, |row| {
        if row.step % every == 0 || row.step + 1 == cfg.steps {
            eprintln!("step {} loss {:.6} ce {:.6} kl {:.6}", row.step, row.loss, row.ce, row.kl);
        }
    })?;
    for (step, report) in &outcome.evals {
        eprintln!("step {step} train-split miou {:.4}", report.miou);
    }
    write_outputs(&cfg, &outcome)?;
    match &cfg.checkpoint {
        Some(p) => println!("checkpoint written to {}", p.display()),
        None => eprintln!("no checkpoint path configured; model discarded"),
    }
    Ok(())
}

fn cmd_eval(ckpt: Option<&Path>, episodes: usize, k: usize, seed: u64, config: Option<&Path>, oracle: bool) -> Result<()> {
    let cfg = data_config(config)?;
    let bank = generate_class_bank(cfg.n_classes, cfg.bank_seed)?;
    let spec = EvalSpec {
        episodes,
        k,
        height: cfg.image_size,
        width: cfg.image_size,
        seed,
    };
    let predictor: Box<dyn Predictor> = match (oracle, ckpt) {
        (true, _) => Box::new(OraclePredictor),
        (false, Some(p)) => Box::new(load_model(p).with_context(|| format!("loading checkpoint {}", p.display()))?),
        (false, None) => bail!("--ckpt is required without --oracle"),
    };
    let report = evaluate(predictor.as_ref(), &bank, &cfg.split, spec)?;
    println!("{report}");
    Ok(())
}

fn cmd_grad_check(seed: u64) -> Result<bool> {
    let report = run_suite(seed)?;
    for (name, check) in &report.checks {
        println!("{name:<44} {:>10.3e}  ({} entries)", check.max_rel_err, check.checked);
    }
    let max = report.max_rel_err();
    println!("max relative error {max:.3e} (tolerance {TOLERANCE:e})");
    Ok(report.passes())
}

fn test_episode(cfg: &RunConfig, index: u64, k: usize, seed: u64, split: Split) -> Result<Episode> {
    let bank = generate_class_bank(cfg.n_classes, cfg.bank_seed)?;
    let classes = match split {
        Split::Train => cfg.split.train(),
        Split::Test => cfg.split.test(),
    };
    if classes.is_empty() {
        bail!("the selected split has no classes");
    }
    Ok(indexed_episode(&bank, classes, index, k, cfg.image_size, cfg.image_size, seed)?)
}

fn write_episode(dir: &Path, episode: &Episode) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    pnm::write_ppm(&dir.join("query.ppm"), &episode.query.image)?;
    pnm::write_mask(&dir.join("query_mask.pgm"), &episode.query.mask)?;
    for (i, s) in episode.support.iter().enumerate() {
        pnm::write_ppm(&dir.join(format!("support{i}.ppm")), &s.image)?;
        pnm::write_mask(&dir.join(format!("support{i}_mask.pgm")), &s.mask)?;
    }
    Ok(())
}

fn cmd_dump_corr(ckpt: &Path, out: &Path, k: usize, seed: u64, config: Option<&Path>) -> Result<()> {
    let cfg = data_config(config)?;
    let net: HdmNet = load_model(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let episode = test_episode(&cfg, 0, k, seed, Split::Test)?;
    write_episode(out, &episode)?;
    let (g, pass) = net.infer(&episode.query.image, &episode.support_pairs())?;
    let prediction = net.predict(&episode.query.image, &episode.support_pairs())?;
    pnm::write_mask(&out.join("prediction.pgm"), &prediction)?;
    pnm::write_heatmap(&out.join("prior.pgm"), &pass.prior.values, pass.prior.h, pass.prior.w)?;
    for (li, stage) in pass.stages.iter().enumerate() {
        let l = li + 1;
        match (stage.reorganized, stage.distribution) {
            (Some(r), Some(d)) => {
                pnm::write_heatmap(&out.join(format!("stage{l}_corr.pgm")), g.value(r), stage.h, stage.w)?;
                pnm::write_heatmap(&out.join(format!("stage{l}_dist.pgm")), g.value(d), stage.h, stage.w)?;
            }
            _ => eprintln!("stage {l}: no support foreground at {}×{}, skipped", stage.h, stage.w),
        }
    }
    println!("class {} written to {}", episode.class_id, out.display());
    Ok(())
}

fn cmd_make_data(out: &Path, episodes: usize, k: usize, seed: u64, split: Split, config: Option<&Path>) -> Result<()> {
    let cfg = data_config(config)?;
    let mut index = String::from("episode,class\n");
    for i in 0..episodes {
        let episode = test_episode(&cfg, i as u64, k, seed, split)?;
        write_episode(&out.join(format!("episode{i:03}")), &episode)?;
        index.push_str(&format!("{i},{}\n", episode.class_id));
    }
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("episodes.csv"), index)?;
    println!("{episodes} episodes written to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, checkpoint, log } => cmd_train(&config, checkpoint, log).map(|_| true),
        Command::Eval {
            ckpt,
            episodes,
            k,
            seed,
            config,
            oracle,
        } => cmd_eval(ckpt.as_deref(), episodes, k, seed, config.as_deref(), oracle).map(|_| true),
        Command::GradCheck { seed } => cmd_grad_check(seed),
        Command::DumpCorr { ckpt, out, k, seed, config } => cmd_dump_corr(&ckpt, &out, k, seed, config.as_deref()).map(|_| true),
        Command::MakeData {
            out,
            episodes,
            k,
            seed,
            split,
            config,
        } => cmd_make_data(&out, episodes, k, seed, split, config.as_deref()).map(|_| true),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check exceeded tolerance {TOLERANCE:e}");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
