//! `rhi`: dataset generation, model training, experiments and diagnostics.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rhi_core::causal::steady_state_gamma;
use rhi_core::config::KvConfig;
use rhi_core::env::{Condition, EnvConfig, StimMode};
use rhi_core::generative::{train, Dataset, ModelKind, TrainConfig};
use rhi_core::harness::{
    check_keys, emit_plots, run_experiment, summarize_run_dir, summary_csv, ExperimentConfig, GenerationConfig,
};
use rhi_core::{Error, Result};

#[derive(Parser)]
#[command(name = "rhi", version, about = "Active-inference rubber-hand illusion simulator")]
struct Cli {
    /// Flat `key = value` config file; may be repeated, later files win.
    #[arg(long = "config", global = true)]
    configs: Vec<PathBuf>,
    /// Override one config key; may be repeated, applied after files.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Training datasets.
    Dataset {
        #[command(subcommand)]
        action: DatasetCmd,
    },
    /// Train a visual generative model.
    Train(TrainArgs),
    /// Run the experiment protocol.
    Run(RunArgs),
    /// Recompute summaries and plots from a run directory.
    Report {
        /// Directory written by `run` (contains resolved-config.txt).
        run_dir: PathBuf,
    },
    /// Render the resting arm for each condition and print image checksums.
    RenderCheck {
        /// Directory for the PGM images.
        #[arg(long, default_value = "render-check")]
        out: PathBuf,
    },
    /// Simulate γ over stimulation schedules, sync against async.
    GammaSim {
        /// Number of paired schedules.
        #[arg(long, default_value_t = 100)]
        pairs: u64,
        /// Events per schedule.
        #[arg(long, default_value_t = 14)]
        events: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Render a joint-angle grid and save it.
    Gen {
        /// Output file (key `dataset_path`).
        #[arg(long)]
        out: Option<String>,
        /// Samples per joint, both joints (keys `grid_shoulder`, `grid_elbow`).
        #[arg(long)]
        grid: Option<usize>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = ["decoder", "vae"])]
    model: String,
    /// Dataset file (key `dataset_path`); generated on the fly if absent.
    #[arg(long)]
    dataset: Option<String>,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
    /// Key `train_epochs`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Key `train_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Key `optimizer` (sgd or adam).
    #[arg(long)]
    optimizer: Option<String>,
    /// Key `train_lr`.
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    /// Key `model_path`.
    #[arg(long)]
    model: Option<String>,
    /// Key `run_id`.
    #[arg(long)]
    run_id: Option<String>,
    /// Key `out_dir`.
    #[arg(long)]
    out_dir: Option<String>,
    /// Key `master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Key `trials_per_cell`.
    #[arg(long)]
    trials: Option<usize>,
    /// Key `threads`.
    #[arg(long)]
    threads: Option<usize>,
}

/// Layers config files (each may name `env_config` / `agent_config` files,
/// which sit beneath it), then `--set` overrides, then `flags`.
fn resolve(cli: &Cli, flags: &[(&str, Option<String>)]) -> Result<KvConfig> {
    let mut kv = KvConfig::new();
    for path in &cli.configs {
        let file = KvConfig::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for key in ["env_config", "agent_config"] {
            if let Some(sub) = file.get_str(key) {
                kv.merge(&KvConfig::load(&base.join(sub))?);
            }
        }
        kv.merge(&file);
    }
    for s in &cli.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
        kv.set(k.trim(), v.trim());
    }
    for (k, v) in flags {
        if let Some(v) = v {
            kv.set(k, v);
        }
    }
    check_keys(&kv)?;
    Ok(kv)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } | Error::TrialAborted { .. } | Error::NonFinite(_) => 2,
        Error::Io(_) | Error::Format { .. } => 3,
        _ => 1,
    }
}

fn dataset_gen(kv: &KvConfig) -> Result<()> {
    let env = EnvConfig::from_kv(kv)?;
    let g = GenerationConfig::from_kv(kv)?;
    let ds = Dataset::generate(g.grid, &env, false)?;
    if let Some(dir) = g.dataset_path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    ds.save(&g.dataset_path)?;
    println!("{} samples, {} distinct images", ds.len(), ds.distinct_images());
    println!("sha256 {}", ds.content_hash());
    println!("wrote {}", g.dataset_path.display());
    Ok(())
}

fn train_cmd(kv: &KvConfig, kind: ModelKind, out: &Path) -> Result<()> {
    let env = EnvConfig::from_kv(kv)?;
    let cfg = TrainConfig::from_kv(kv)?;
    let g = GenerationConfig::from_kv(kv)?;
    let ds = if g.dataset_path.exists() {
        Dataset::load(&g.dataset_path)?
    } else {
        log::info!("{} not found; rendering a {}×{} grid", g.dataset_path.display(), g.grid[0], g.grid[1]);
        Dataset::generate(g.grid, &env, false)?
    };
    let model = train(kind, &ds, &env, &cfg, |r| {
        log::info!("epoch {:4}: objective {:.5e}, recon mse {:.5e}", r.epoch, r.objective, r.recon_mse)
    })?;
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    model.save(out)?;
    println!("final per-pixel mse {:.6e}", model.meta.final_loss);
    println!("weights sha256 {}", model.weight_hash());
    println!("wrote {}", out.display());
    Ok(())
}

fn run_cmd(kv: &KvConfig) -> Result<bool> {
    let cfg = ExperimentConfig::from_kv(kv)?;
    let (result, dir) = run_experiment(&cfg)?;
    println!("{:<7}{:<6}{:>11}{:>10}{:>14}{:>10}", "cond", "mode", "drift_cm", "±std", "|force|", "γ_tail");
    for c in &result.cells {
        println!(
            "{:<7}{:<6}{:>11.4}{:>10.4}{:>14.5e}{:>10.4}{}",
            c.condition.as_str(),
            c.mode.as_str(),
            c.drift_mean,
            c.drift_std,
            c.mean_abs_force,
            c.gamma_tail_mean,
            if c.complete { "" } else { "  (incomplete)" }
        );
    }
    println!("wrote {}", dir.display());
    Ok(!result.any_aborted())
}

fn report_cmd(dir: &Path) -> Result<()> {
    let kv = KvConfig::load(&dir.join("resolved-config.txt"))?;
    let cfg = ExperimentConfig::from_kv(&kv)?;
    let cells = summarize_run_dir(&cfg, dir)?;
    let csv = summary_csv(&cells)?;
    let written = std::fs::read(dir.join("summary.csv"))?;
    emit_plots(&cells, &dir.join("plots"))?;
    print!("{}", String::from_utf8_lossy(&csv));
    if csv != written {
        log::warn!("summary.csv differs from the summary recomputed from the traces");
    }
    Ok(())
}

fn render_check(kv: &KvConfig, out: &Path) -> Result<()> {
    use sha2::{Digest, Sha256};
    let env = EnvConfig::from_kv(kv)?;
    std::fs::create_dir_all(out)?;
    for c in Condition::ALL {
        let img = env.render(env.rest, env.offset(c))?;
        let path = out.join(format!("rest_{c}.pgm"));
        img.write_pgm(&path)?;
        let hash: String = Sha256::digest(img.to_pgm()).iter().map(|b| format!("{b:02x}")).collect();
        let (cx, cy) = img.centroid().unwrap_or((f64::NAN, f64::NAN));
        println!("{c:<7} lit {:5}  centroid ({cx:.3}, {cy:.3})  sha256 {hash}", img.lit_count());
    }
    Ok(())
}

fn gamma_sim(kv: &KvConfig, pairs: u64, events: usize, seed: u64) -> Result<()> {
    let env = EnvConfig::from_kv(kv)?;
    let agent = rhi_core::agent::AgentConfig::from_kv(kv)?;
    let mut wins = 0;
    let (mut s_sum, mut a_sum) = (0.0, 0.0);
    println!("pair,sync_tail_mean,async_tail_mean");
    for p in 0..pairs {
        let mut rs = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2 * p));
        let mut ra = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2 * p + 1));
        let s = steady_state_gamma(StimMode::Sync, &agent.causal, &env.stimulation, events, agent.gamma0, &mut rs)?;
        let a = steady_state_gamma(StimMode::Async, &agent.causal, &env.stimulation, events, agent.gamma0, &mut ra)?;
        println!("{p},{},{}", s.tail_mean, a.tail_mean);
        wins += (s.tail_mean > a.tail_mean) as u64;
        s_sum += s.tail_mean;
        a_sum += a.tail_mean;
    }
    let n = pairs.max(1) as f64;
    eprintln!(
        "mean tail γ: sync {:.4}, async {:.4}; sync > async in {wins}/{pairs} pairs",
        s_sum / n,
        a_sum / n
    );
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Dataset {
            action: DatasetCmd::Gen { out, grid },
        } => {
            let g = grid.map(|g| g.to_string());
            let kv = resolve(
                cli,
                &[("dataset_path", out.clone()), ("grid_shoulder", g.clone()), ("grid_elbow", g)],
            )?;
            dataset_gen(&kv)?;
        }
        Command::Train(a) => {
            let kv = resolve(
                cli,
                &[
                    ("dataset_path", a.dataset.clone()),
                    ("train_epochs", a.epochs.map(|v| v.to_string())),
                    ("train_seed", a.seed.map(|v| v.to_string())),
                    ("optimizer", a.optimizer.clone()),
                    ("train_lr", a.lr.map(|v| v.to_string())),
                ],
            )?;
            train_cmd(&kv, a.model.parse()?, &a.out)?;
        }
        Command::Run(a) => {
            let kv = resolve(
                cli,
                &[
                    ("model_path", a.model.clone()),
                    ("run_id", a.run_id.clone()),
                    ("out_dir", a.out_dir.clone()),
                    ("master_seed", a.seed.map(|v| v.to_string())),
                    ("trials_per_cell", a.trials.map(|v| v.to_string())),
                    ("threads", a.threads.map(|v| v.to_string())),
                ],
            )?;
            return run_cmd(&kv);
        }
        Command::Report { run_dir } => report_cmd(run_dir)?,
        Command::RenderCheck { out } => render_check(&resolve(cli, &[])?, out)?,
        Command::GammaSim { pairs, events, seed } => gamma_sim(&resolve(cli, &[])?, *pairs, *events, *seed)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        // some trial aborted; outputs were written and the cells marked
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
