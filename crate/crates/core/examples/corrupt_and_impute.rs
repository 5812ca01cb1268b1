//! Drops and perturbs observations, then fills the gaps by carrying the
//! last observation forward.
//!
//! cargo run --release --example corrupt_and_impute

use scnn::data::{corrupt, generate, Corruption, SynthSpec};

fn main() -> scnn::Result<()> {
    let (data, _) = generate(&SynthSpec {
        n_vars: 3,
        len: 500,
        cycle: 24,
        seed: 7,
        ..SynthSpec::default()
    })?;

    let mut holes = corrupt(&data, "missing:0.2".parse::<Corruption>()?, 7)?;
    let dropped = holes.missing.iter().filter(|&&m| m).count();
    println!("dropped {dropped} of {} cells", holes.missing.len());
    // The mask survives imputation so callers can still tell filled cells apart.
    holes.impute_locf();
    let still = holes.values.data().iter().filter(|v| !v.is_finite()).count();
    let err: f64 = (0..data.n_vars())
        .flat_map(|v| (0..data.len()).map(move |t| (v, t)))
        .map(|(v, t)| (holes.get(v, t) - data.get(v, t)).abs())
        .sum::<f64>()
        / dropped.max(1) as f64;
    println!("after carrying forward: {still} non-finite cells left, mean fill error {err:.3}");

    let noisy = corrupt(&data, Corruption::Gaussian(0.5), 7)?;
    let shift = noisy.values.max_abs_diff(&data.values);
    println!("gaussian:0.5 noise moved values by at most {shift:.3}");
    Ok(())
}
