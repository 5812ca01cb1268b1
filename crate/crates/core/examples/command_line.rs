//! Drives the `scnn` command line in-process: generate, train, evaluate
//! and bench, exactly as the binary would.
//!
//! cargo run --release --example command_line [work_dir]

use std::path::PathBuf;

fn scnn(args: &[&str]) -> i32 {
    let mut stdin = std::io::empty();
    let mut input = std::io::BufReader::new(&mut stdin);
    let (mut out, mut err) = (std::io::stdout(), std::io::stderr());
    let mut full = vec!["scnn"];
    full.extend_from_slice(args);
    println!("$ {}", full.join(" "));
    scnn::cli::run(full, &mut input, &mut out, &mut err)
}

fn main() {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("scnn-examples").join("command_line"));
    let p = |s: &str| dir.join(s).display().to_string();
    let (data, run, ckpt) = (p("data"), p("run"), p("run/model.ckpt"));
    let csv = p("data/data.csv");
    let steps: [Vec<&str>; 4] = [
        vec!["generate", "--out", &data, "--set", "data.n_vars=3", "--set", "data.len=600", "--set", "data.cycle=12"],
        vec![
            "train", "--data", &csv, "--out", &run,
            "--set", "model.t_in=36", "--set", "model.d_z=4", "--set", "model.layers=2",
            "--set", "train.max_epochs=3", "--set", "train.lr=0.003", "--set", "train.windows_per_epoch=48",
        ],
        vec!["evaluate", "--model", &ckpt, "--data", &csv],
        vec!["bench", "--model", &ckpt, "--data", &csv, "--samples", "16"],
    ];
    for args in &steps {
        let code = scnn(args);
        assert_eq!(code, 0, "step failed");
    }
}
