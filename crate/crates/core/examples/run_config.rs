//! Reads an INI run configuration, applies command-line style overrides
//! and prints the fully resolved snapshot that reproduces the run.
//!
//! cargo run --release --example run_config

use scnn::config::RunConfig;

const RUN: &str = "
[model]
t_in = 72
layers = 3
alpha = 0.25

[train]
lr = 0.001
max_epochs = 40

[data]
n_vars = 8
len = 2000
";

fn main() -> scnn::Result<()> {
    let mut cfg = RunConfig::parse(RUN, "run.ini")?;
    for o in ["train.seed=11", "model.d_z=4"] {
        cfg.apply_override(o)?;
    }
    let model = cfg.model_config(cfg.data.n_vars, cfg.data.cycle)?;
    println!(
        "long-term window {}, seasonal window {} cycles of {}",
        model.delta_lt, model.tau, model.cycle
    );
    print!("{}", cfg.resolved(&model));

    match RunConfig::parse("[model]\nlayerz = 3\n", "typo.ini") {
        Err(e) => println!("rejected: {e}"),
        Ok(_) => unreachable!("unknown keys are errors"),
    }
    Ok(())
}
