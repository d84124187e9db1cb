//! Offset statistics: capture from a model, then block selection and
//! pairwise correlations on traces with a known correlation structure.
//!
//! Run with `cargo run --example offset_analysis`.

use dtcn::analysis::{capture_offsets, offset_study, planted_means, planted_traces, TARGET_CORRELATIONS};
use dtcn::dtcn::{DtcnConfig, SeparatorModel};
use dtcn::mixsim::{simulate_manifest, SimConfig};

fn main() -> dtcn::Result<()> {
    let model = SeparatorModel::build(&DtcnConfig::toy(), 0)?;
    let ex = simulate_manifest(
        &SimConfig {
            count: 1,
            ..SimConfig::default()
        },
        1,
    )?
    .realize_all()?
    .remove(0);
    let capture = capture_offsets(&model, &ex.mixture)?;
    println!(
        "captured {} blocks of {:?} offsets from an untrained model",
        capture.traces.len(),
        capture.traces[0].tau.shape()
    );

    let corr: Vec<Vec<f64>> = TARGET_CORRELATIONS.iter().map(|r| r.to_vec()).collect();
    let means = planted_means(&corr, 50, 0.3, 11)?;
    let traces = planted_traces(&means, 8, 40, 6, 12)?;
    let study = offset_study(&traces)?;
    for s in &study.summary {
        println!("block {}: variance {:.4}", s.block + 1, s.variance);
    }
    println!("selected block {}", study.selected + 1);
    for t in &study.scatters {
        println!(
            "tau_{} vs tau_{}: rho {:+.3} (planted {:+.2}), fit y = {:.3} x + {:.3}",
            t.p + 1,
            t.q + 1,
            t.rho,
            corr[t.p][t.q],
            t.slope,
            t.intercept
        );
    }
    Ok(())
}
