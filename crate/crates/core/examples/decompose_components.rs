//! Splits one window into long-term, seasonal, short-term and
//! co-evolving components and rebuilds it from them.
//!
//! cargo run --release --example decompose_components

use scnn::data::{generate, SynthSpec};
use scnn::decouple::{decouple_block, reconstruct, DecoupleConfig, COMPONENT_NAMES};
use scnn::tape::{Graph, Tensor};

fn main() -> scnn::Result<()> {
    let (n, t, cycle) = (4, 96, 24);
    let (data, _) = generate(&SynthSpec {
        n_vars: n,
        len: t,
        cycle,
        seed: 5,
        ..SynthSpec::default()
    })?;
    // One channel per variable: [batch, variable, time, channel].
    let x = Tensor::from_fn(&[1, n, t, 1], |i| data.values.data()[i]);
    let mut cfg = DecoupleConfig::new(n, t, cycle);
    cfg.d_z = 1;
    cfg.eps = 1e-6;

    let mut g = Graph::new();
    let z0 = g.constant(x.clone());
    // Uniform attention: the co-evolving component is the cross-variable mean.
    let alpha = g.constant(Tensor::zeros(&[n, n]));
    let out = decouple_block(&mut g, z0, alpha, &cfg)?;

    let comps = out.components.to_array().map(|v| g.value(v).clone());
    for (name, c) in COMPONENT_NAMES.iter().zip(&comps) {
        let last: Vec<String> = (0..n).map(|v| format!("{:7.3}", c.get(&[0, v, t - 1, 0]))).collect();
        println!("{name:<9} at t={}: {}", t - 1, last.join(" "));
    }
    let residual = g.value(out.residuals.z4);
    let back = reconstruct(&comps, residual);
    println!("reconstruction error {:.2e}", back.max_abs_diff(&x));
    Ok(())
}
