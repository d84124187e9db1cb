//! Trains the small separator on simulated mixtures and saves checkpoints.
//!
//! Run with `cargo run --release --example train_toy [epochs] [out_dir]`.

use std::path::PathBuf;

use dtcn::dtcn::DtcnConfig;
use dtcn::mixsim::{derive_seed, simulate_manifest, SimConfig};
use dtcn::trainer::{train, RunPaths, TrainConfig, TrainState};

fn main() -> dtcn::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("dtcn_train"));

    let seed = 0;
    let data = SimConfig {
        count: 40,
        ..SimConfig::default()
    };
    let train_set = simulate_manifest(&data, seed)?;
    let eval = simulate_manifest(&SimConfig { count: 10, ..data }, derive_seed(seed, 1))?.realize_all()?;

    let tc = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(&DtcnConfig::toy(), seed, tc.learning_rate)?;
    let outcome = train(&mut state, &train_set, &eval, &tc, Some(&RunPaths::new(&out)))?;
    for (summary, (_, report)) in outcome.epochs.iter().zip(&outcome.evaluations) {
        println!(
            "epoch {:>2}: train loss {:>7.2}, eval dSISDR {:>6.2} dB",
            summary.epoch, summary.mean_loss, report.mean_delta
        );
    }
    println!("checkpoints in {}", out.display());
    Ok(())
}
