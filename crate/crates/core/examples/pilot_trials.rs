//! Pilot trials used to settle the agent's precisions and step sizes.
//!
//! Usage: `cargo run --release --example pilot_trials -- <model-file> [key=value ...]`
//! with agent config keys as overrides plus `trials` (per cell).

use rhi_core::agent::{run_trial, AgentConfig, TrialSetup};
use rhi_core::config::KvConfig;
use rhi_core::env::{Condition, EnvConfig, StimMode};
use rhi_core::generative::VisualModel;

fn main() -> rhi_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args.next().expect("model file argument");
    let mut kv = KvConfig::new();
    for a in args {
        let (k, v) = a.split_once('=').expect("arguments are key=value");
        kv.set(k, v);
    }
    let trials: u64 = kv.get("trials")?.unwrap_or(2);
    let model = VisualModel::load(std::path::Path::new(&path))?;
    let env = EnvConfig::default();
    let agent = AgentConfig::from_kv(&kv)?;
    for condition in Condition::ALL {
        for mode in StimMode::ALL {
            let (mut drift, mut force, mut oob) = (0.0, 0.0, 0usize);
            for seed in 0..trials {
                let setup = TrialSetup {
                    env: env.clone(),
                    agent: agent.clone(),
                    condition,
                    mode,
                    seed,
                };
                let tr = run_trial(&setup, &model)?;
                let x0 = env.hand(rhi_core::env::JointAngles::from_array(tr.initial_mu)).x;
                drift += 100.0 * (tr.records.last().unwrap().ee_mu[0] - x0);
                force += tr.records.iter().map(|r| r.ee_accel_x).sum::<f64>() / tr.len() as f64;
                oob += tr.records.iter().filter(|r| r.oob).count();
            }
            let n = trials as f64;
            println!(
                "{condition:>6} {mode:>5}: drift {:+.3} cm, mean force {:+.4e}, oob steps {oob}",
                drift / n,
                force / n
            );
        }
    }
    Ok(())
}
