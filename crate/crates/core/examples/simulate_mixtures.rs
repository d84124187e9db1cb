//! Simulates a small reverberant two-speaker set and writes it as WAV files.
//!
//! Run with `cargo run --example simulate_mixtures [out_dir]`.

use std::path::PathBuf;

use dtcn::frames::write_wav;
use dtcn::mixsim::{simulate_manifest, SimConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("dtcn_mixtures"));
    std::fs::create_dir_all(&out)?;

    let cfg = SimConfig {
        count: 4,
        ..SimConfig::default()
    };
    let manifest = simulate_manifest(&cfg, 7)?;
    manifest.save(&out.join("manifest.txt"))?;
    for (spec, ex) in manifest.entries.iter().zip(manifest.realize_all()?) {
        let t60: Vec<String> = ex.meta.t60.iter().map(|t| format!("{t:.2}")).collect();
        println!(
            "{}: {} samples, speaker SNR {:.1} dB, T60 [{}] s, noise {:?}",
            spec.id,
            ex.mixture.len(),
            ex.meta.mix_snr,
            t60.join(", "),
            ex.meta.noise_snr.map(|s| format!("{s:.1} dB")),
        );
        write_wav(&out.join(format!("{}_mix.wav", spec.id)), &ex.mixture)?;
        for (c, s) in ex.direct_targets.iter().enumerate() {
            write_wav(&out.join(format!("{}_s{}.wav", spec.id, c + 1)), s)?;
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}
