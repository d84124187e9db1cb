//! Synthetic reverberant multi-speaker mixtures.
//!
//! Each speaker `c` contributes `h_c * s_c`, split into the direct-path part
//! (the separation target) and the reverberant tail. Noise is optional.

mod manifest;
mod sources;

pub use manifest::{
    dynamic_remix, simulate_manifest, ExampleSpec, Manifest, Pairing, SimConfig, SourceRef, SNR_LIMIT_DB,
};
pub use sources::{gen_source, gen_sources, noise_signal, source_len, speed_perturb, SourceKind, SOURCE_RMS};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::frames::Waveform;

/// Standard deviation of the reverberant tail right after the direct tap.
pub const DEFAULT_TAIL_GAIN: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RirSpec {
    /// Time for the tail energy to fall by 60 dB, in seconds.
    pub t60: f64,
    pub num_taps: usize,
    /// Index of the direct-path tap.
    pub direct_delay: usize,
    pub seed: u64,
    pub sample_rate: u32,
    pub tail_gain: f64,
}

impl RirSpec {
    /// Spec whose tap count just covers `t60` after the direct tap.
    pub fn covering(t60: f64, direct_delay: usize, seed: u64, sample_rate: u32) -> Self {
        let tail = (t60 * f64::from(sample_rate)).ceil() as usize;
        Self {
            t60,
            num_taps: direct_delay + 1 + tail,
            direct_delay,
            seed,
            sample_rate,
            tail_gain: DEFAULT_TAIL_GAIN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t60 >= 0.0 && self.t60.is_finite()) {
            return Err(Error::InvalidArgument(format!("t60 must be >= 0, got {}", self.t60)));
        }
        if self.num_taps == 0 || self.direct_delay >= self.num_taps {
            return Err(Error::InvalidArgument(format!(
                "rir needs direct_delay < num_taps, got {} and {}",
                self.direct_delay, self.num_taps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rir {
    pub taps: Vec<f64>,
    pub direct_delay: usize,
}

/// Unit direct tap followed by Gaussian noise whose amplitude decays as
/// `10^(-3 t / t60)`, `t` measured from the direct tap.
pub fn gen_rir(spec: &RirSpec) -> Result<Rir> {
    spec.validate()?;
    let mut taps = vec![0.0; spec.num_taps];
    taps[spec.direct_delay] = 1.0;
    if spec.t60 > 0.0 && spec.tail_gain > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, spec.tail_gain).expect("positive std");
        let fs = f64::from(spec.sample_rate);
        for (i, tap) in taps.iter_mut().enumerate().skip(spec.direct_delay + 1) {
            let t = (i - spec.direct_delay) as f64 / fs;
            *tap = normal.sample(&mut rng) * 10f64.powf(-3.0 * t / spec.t60);
        }
    }
    Ok(Rir {
        taps,
        direct_delay: spec.direct_delay,
    })
}

/// `(h * s)[0..len(s))`.
pub fn convolve_truncated(h: &[f64], s: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; s.len()];
    for (k, &hk) in h.iter().enumerate() {
        if hk == 0.0 || k >= s.len() {
            continue;
        }
        for (o, &v) in out[k..].iter_mut().zip(s) {
            *o += hk * v;
        }
    }
    out
}

/// Direct-path and reverberant parts of `h * s`, each truncated to `len(s)`.
pub fn split_direct(h: &Rir, s: &Waveform) -> (Waveform, Waveform) {
    let d = h.direct_delay;
    let gain = h.taps[d];
    let mut dir = vec![0.0; s.len()];
    if d < s.len() {
        for (o, &v) in dir[d..].iter_mut().zip(&s.samples) {
            *o = gain * v;
        }
    }
    let mut tail = h.taps.clone();
    tail[d] = 0.0;
    let rev = convolve_truncated(&tail, &s.samples);
    (Waveform::new(dir, s.sample_rate), Waveform::new(rev, s.sample_rate))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureMeta {
    pub mix_snr: f64,
    pub noise_snr: Option<f64>,
    pub t60: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureExample {
    pub mixture: Waveform,
    /// Separation targets `s_dir,c`.
    pub direct_targets: Vec<Waveform>,
    /// Reverberant tails `s_rev,c`.
    pub reverberant: Vec<Waveform>,
    /// Dry sources after gain adjustment, so `h_c * sources[c]` is speaker c's image.
    pub sources: Vec<Waveform>,
    pub rirs: Vec<Rir>,
    pub noise: Option<Waveform>,
    pub meta: MixtureMeta,
}

fn snr_db(signal: f64, interference: f64) -> f64 {
    10.0 * (signal / interference).log10()
}

/// Energy ratio in dB between two signals of equal length.
pub fn measure_snr(signal: &[f64], interference: &[f64]) -> f64 {
    let e = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    snr_db(e(signal), e(interference))
}

/// Mixes reverberant sources and optional noise.
///
/// All signals are cut to the shortest length. Every speaker after the first
/// is scaled so the reverberant speech of speaker 1 over speaker `c` is
/// `mix_snr` dB; the noise is scaled so the summed reverberant speech over the
/// noise is `noise_snr` dB.
pub fn mix(
    sources: &[Waveform],
    rirs: &[Rir],
    noise: Option<(&Waveform, f64)>,
    mix_snr: f64,
) -> Result<MixtureExample> {
    if sources.is_empty() {
        return Err(Error::EmptyInput("mix"));
    }
    if rirs.len() != sources.len() {
        return Err(Error::dim("mix", format!("{} rirs", sources.len()), rirs.len()));
    }
    let rate = sources[0].sample_rate;
    if let Some(s) = sources.iter().find(|s| s.sample_rate != rate) {
        return Err(Error::SampleRate {
            expected: rate,
            got: s.sample_rate,
        });
    }
    let mut len = sources.iter().map(Waveform::len).min().unwrap_or(0);
    if let Some((n, _)) = noise {
        len = len.min(n.len());
    }
    if len == 0 {
        return Err(Error::EmptyInput("mix"));
    }

    let mut dry = Vec::with_capacity(sources.len());
    let mut dir = Vec::with_capacity(sources.len());
    let mut rev = Vec::with_capacity(sources.len());
    for (c, (s, h)) in sources.iter().zip(rirs).enumerate() {
        let s = Waveform::new(s.samples[..len].to_vec(), rate);
        let (d, r) = split_direct(h, &s);
        let image_energy: f64 = d.samples.iter().zip(&r.samples).map(|(a, b)| (a + b).powi(2)).sum();
        if image_energy == 0.0 {
            return Err(Error::InvalidArgument(format!("source {c} is silent")));
        }
        dry.push(s);
        dir.push(d);
        rev.push(r);
    }
    let image_energy =
        |d: &Waveform, r: &Waveform| -> f64 { d.samples.iter().zip(&r.samples).map(|(a, b)| (a + b).powi(2)).sum() };
    let ref_energy = image_energy(&dir[0], &rev[0]);
    for c in 1..sources.len() {
        let e = image_energy(&dir[c], &rev[c]);
        let gain = (ref_energy / e / 10f64.powf(mix_snr / 10.0)).sqrt();
        dry[c] = dry[c].scaled(gain);
        dir[c] = dir[c].scaled(gain);
        rev[c] = rev[c].scaled(gain);
    }

    let mut mixture = vec![0.0; len];
    for (d, r) in dir.iter().zip(&rev) {
        for ((m, a), b) in mixture.iter_mut().zip(&d.samples).zip(&r.samples) {
            *m += a + b;
        }
    }
    let (noise_out, noise_snr) = match noise {
        Some((n, snr)) => {
            let speech_energy: f64 = mixture.iter().map(|v| v * v).sum();
            let n = Waveform::new(n.samples[..len].to_vec(), rate);
            if n.energy() == 0.0 {
                return Err(Error::InvalidArgument("noise is silent".into()));
            }
            let n = n.scaled((speech_energy / n.energy() / 10f64.powf(snr / 10.0)).sqrt());
            for (m, v) in mixture.iter_mut().zip(&n.samples) {
                *m += v;
            }
            (Some(n), Some(snr))
        }
        None => (None, None),
    };

    Ok(MixtureExample {
        mixture: Waveform::new(mixture, rate),
        direct_targets: dir,
        reverberant: rev,
        sources: dry,
        rirs: rirs.to_vec(),
        noise: noise_out,
        meta: MixtureMeta {
            mix_snr,
            noise_snr,
            t60: Vec::new(),
            seeds: Vec::new(),
        },
    })
}

/// SplitMix64 finalizer; derives independent stream seeds from a base seed.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base
        ^ tag
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
