//! Separates one simulated mixture and scores the estimates.
//!
//! Run with `cargo run --example separate_mixture [checkpoint]`. Without a
//! checkpoint an untrained toy model is used, which returns the mixture
//! divided evenly between the speakers.

use dtcn::dtcn::{Checkpoint, DtcnConfig, SeparatorModel};
use dtcn::frames::write_wav;
use dtcn::mixsim::{simulate_manifest, SimConfig};
use dtcn::objective::{delta_sisdr, pit_loss};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = match std::env::args().nth(1) {
        Some(path) => SeparatorModel::from_checkpoint(&Checkpoint::load(path.as_ref())?)?,
        None => SeparatorModel::build(&DtcnConfig::toy(), 0)?,
    };
    let ex = simulate_manifest(
        &SimConfig {
            count: 1,
            ..SimConfig::default()
        },
        3,
    )?
    .realize_all()?
    .remove(0);

    let estimates = model.separate(&ex.mixture)?;
    let pit = pit_loss(&estimates, &ex.direct_targets)?;
    let out = std::env::temp_dir().join("dtcn_separated");
    std::fs::create_dir_all(&out)?;
    for (e, &r) in pit.assignment.0.iter().enumerate() {
        let gain = delta_sisdr(&estimates[e], &ex.direct_targets[r], &ex.mixture)?;
        println!("estimate {e} -> speaker {r}: dSISDR {gain:.2} dB");
        write_wav(&out.join(format!("spk{}.wav", r + 1)), &estimates[e])?;
    }
    println!("PIT loss {:.2}, estimates in {}", pit.loss, out.display());
    Ok(())
}
