//! Static visual pull at the resting belief: the horizontal hand force the
//! visual term would produce for each condition's view, with γ = 1.
//!
//! Usage: `cargo run --release --example pilot_bias -- <model-file>...`

use rhi_core::env::{fk_jacobian, Condition, EnvConfig};
use rhi_core::generative::VisualModel;

fn main() -> rhi_core::Result<()> {
    let env = EnvConfig::default();
    let jac = fk_jacobian(env.rest, &env.geometry);
    for path in std::env::args().skip(1) {
        let model = VisualModel::load(std::path::Path::new(&path))?;
        let mut s = model.session()?;
        let g = s.predict(env.rest)?.image;
        let n = g.pixels().len() as f64;
        let mut pulls = Vec::new();
        for c in Condition::ALL {
            let sv = env.render(env.rest, env.offset(c))?;
            let err: Vec<f64> = sv.pixels().iter().zip(g.pixels()).map(|(a, b)| (a - b) / n).collect();
            let v = s.adjoint(&err)?;
            pulls.push((c, jac[0][0] * v[0] + jac[0][1] * v[1], v));
        }
        let left = pulls[0].1.abs();
        print!("{path}: mse {:.3e}", model.meta.final_loss);
        for (c, x, v) in pulls {
            print!("  {c} {x:+.4e} ({:+.3e},{:+.3e}) [{:.1}%]", v[0], v[1], 100.0 * x.abs() / left);
        }
        if model.kind() == rhi_core::generative::ModelKind::Vae {
            let rest = env.render(env.rest, 0.0)?;
            let (m, lv) = model.encode(&[rest.pixels()])?[0];
            print!("  enc(rest) mean ({:+.3},{:+.3}) sd ({:.3},{:.3})", m[0], m[1], (0.5 * lv[0]).exp(), (0.5 * lv[1]).exp());
        }
        println!();
    }
    Ok(())
}
