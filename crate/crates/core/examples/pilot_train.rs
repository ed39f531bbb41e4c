//! Pilot training run used to settle training defaults and test thresholds.
//!
//! Usage: `cargo run --release --example pilot_train -- <decoder|vae> [key=value ...]`
//! where the keys are training config keys (`train_epochs`, `optimizer`, ...)
//! plus `grid` (samples per joint).

use std::time::Instant;

use rhi_core::config::KvConfig;
use rhi_core::env::EnvConfig;
use rhi_core::generative::{train, Dataset, ModelKind, TrainConfig};

fn main() -> rhi_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let kind: ModelKind = args.next().unwrap_or_else(|| "decoder".into()).parse()?;
    let mut kv = KvConfig::new();
    for a in args {
        let (k, v) = a.split_once('=').expect("arguments are key=value");
        kv.set(k, v);
    }
    let grid: usize = kv.get("grid")?.unwrap_or(50);
    let env = EnvConfig::default();
    let cfg = TrainConfig::from_kv(&kv)?;
    let t0 = Instant::now();
    let ds = Dataset::generate([grid, grid], &env, false)?;
    let held = Dataset::generate([grid, grid], &env, true)?;
    println!("dataset {} samples, {} distinct, {:.1}s", ds.len(), ds.distinct_images(), t0.elapsed().as_secs_f64());
    let t1 = Instant::now();
    let model = train(kind, &ds, &env, &cfg, |r| {
        println!(
            "epoch {:4} objective {:.5e} recon {:.5e} ({:.1}s)",
            r.epoch,
            r.objective,
            r.recon_mse,
            t1.elapsed().as_secs_f64()
        )
    })?;
    println!("final per-pixel mse {:.5e}", model.meta.final_loss);
    println!("held-out per-pixel mse {:.5e}", model.reconstruction_mse(&held)?);
    if let Some(path) = kv.get_str("save") {
        model.save(std::path::Path::new(path))?;
    }
    Ok(())
}
