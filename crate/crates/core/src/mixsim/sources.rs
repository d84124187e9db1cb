use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::frames::Waveform;
use crate::mixsim::derive_seed;

/// RMS of every generated source.
pub const SOURCE_RMS: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SourceKind {
    /// Harmonic series on a gliding fundamental, `1/k` harmonic amplitudes,
    /// under a syllable-rate envelope.
    ToneChirp,
    /// Gaussian noise through a formant-like resonator, under a syllable-rate envelope.
    AmNoise,
}

impl SourceKind {
    pub const ALL: [SourceKind; 2] = [SourceKind::ToneChirp, SourceKind::AmNoise];
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SourceKind::ToneChirp => "chirp",
            SourceKind::AmNoise => "amnoise",
        })
    }
}

impl FromStr for SourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chirp" => Ok(SourceKind::ToneChirp),
            "amnoise" => Ok(SourceKind::AmNoise),
            other => Err(Error::InvalidArgument(format!("unknown source kind {other:?}"))),
        }
    }
}

fn normalize(mut v: Vec<f64>, rate: u32) -> Waveform {
    let rms = (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    if rms > 0.0 {
        v.iter_mut().for_each(|x| *x *= SOURCE_RMS / rms);
    }
    Waveform::new(v, rate)
}

fn envelope(rng: &mut ChaCha8Rng, len: usize, fs: f64) -> Vec<f64> {
    let rate = rng.gen_range(2.0..6.0);
    let phase = rng.gen_range(0.0..2.0 * PI);
    (0..len)
        .map(|i| {
            let u = 0.5 + 0.5 * (2.0 * PI * rate * i as f64 / fs + phase).sin();
            0.05 + 0.95 * u * u
        })
        .collect()
}

fn draw_len(rng: &mut ChaCha8Rng, fs: f64) -> usize {
    (rng.gen_range(1.0..3.0) * fs).round() as usize
}

/// Length in samples of `gen_source(_, seed, sample_rate)`, without synthesizing it.
pub fn source_len(seed: u64, sample_rate: u32) -> usize {
    draw_len(&mut ChaCha8Rng::seed_from_u64(seed), f64::from(sample_rate))
}

/// One source of 1 to 3 seconds, fully determined by `(kind, seed)`.
pub fn gen_source(kind: SourceKind, seed: u64, sample_rate: u32) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = f64::from(sample_rate);
    let len = draw_len(&mut rng, fs);
    let env = envelope(&mut rng, len, fs);
    let samples = match kind {
        SourceKind::ToneChirp => {
            let f_start: f64 = rng.gen_range(90.0..250.0);
            let f_end = f_start * rng.gen_range(0.7..1.4);
            let nyq = fs / 2.0;
            let harmonics = ((0.85 * nyq) / f_start.max(f_end)).floor().max(1.0) as usize;
            let phases: Vec<f64> = (0..harmonics).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
            let mut phase = 0.0;
            (0..len)
                .map(|i| {
                    let f0 = f_start + (f_end - f_start) * i as f64 / len as f64;
                    phase += 2.0 * PI * f0 / fs;
                    let v: f64 = phases
                        .iter()
                        .enumerate()
                        .map(|(k, p)| ((k + 1) as f64 * phase + p).sin() / (k + 1) as f64)
                        .sum();
                    v * env[i]
                })
                .collect()
        }
        SourceKind::AmNoise => {
            // Two-pole resonator on a formant-like band.
            let fc: f64 = rng.gen_range(500.0..1500.0);
            let r: f64 = rng.gen_range(0.9..0.97);
            let (a1, a2) = (2.0 * r * (2.0 * PI * fc / fs).cos(), -r * r);
            let (mut y1, mut y2) = (0.0, 0.0);
            (0..len)
                .map(|i| {
                    let w: f64 = rng.sample(StandardNormal);
                    let y = w + a1 * y1 + a2 * y2;
                    y2 = y1;
                    y1 = y;
                    y * env[i]
                })
                .collect()
        }
    };
    normalize(samples, sample_rate)
}

/// `count` sources of one kind; element `i` is `gen_source(kind, derive_seed(seed, i))`.
pub fn gen_sources(kind: SourceKind, seed: u64, count: usize, sample_rate: u32) -> Vec<Waveform> {
    (0..count)
        .map(|i| gen_source(kind, derive_seed(seed, i as u64), sample_rate))
        .collect()
}

/// Pink-ish noise from a sum of three one-pole low-pass filters of white noise.
pub fn noise_signal(seed: u64, len: usize, sample_rate: u32) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    let v = (0..len)
        .map(|_| {
            let w: f64 = rng.sample(StandardNormal);
            b0 = 0.99765 * b0 + w * 0.0990460;
            b1 = 0.96300 * b1 + w * 0.2965164;
            b2 = 0.57000 * b2 + w * 1.0526913;
            b0 + b1 + b2 + w * 0.1848
        })
        .collect();
    normalize(v, sample_rate)
}

/// Linear-interpolation resampling: `out[i] = s(i * factor)`, with
/// `round(len / factor)` output samples. Factors above 1 shorten the signal
/// and raise its frequencies.
pub fn speed_perturb(s: &Waveform, factor: f64) -> Result<Waveform> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "speed factor must be > 0, got {factor}"
        )));
    }
    if factor == 1.0 {
        return Ok(s.clone());
    }
    let n = s.len();
    let out_len = (n as f64 / factor).round() as usize;
    let at = |i: usize| {
        s.samples
            .get(i)
            .copied()
            .unwrap_or_else(|| s.samples.last().copied().unwrap_or(0.0))
    };
    let out = (0..out_len)
        .map(|i| {
            let pos = i as f64 * factor;
            let i0 = pos.floor() as usize;
            let frac = pos - i0 as f64;
            at(i0) * (1.0 - frac) + at(i0 + 1) * frac
        })
        .collect();
    Ok(Waveform::new(out, s.sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn centroid(w: &Waveform) -> f64 {
        let n = 512;
        let fs = f64::from(w.sample_rate);
        let (mut num, mut den) = (0.0, 0.0);
        for chunk in w.samples.chunks_exact(n).take(8) {
            for k in 1..n / 2 {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, &x) in chunk.iter().enumerate() {
                    let a = 2.0 * PI * (k * t) as f64 / n as f64;
                    re += x * a.cos();
                    im -= x * a.sin();
                }
                let p = re * re + im * im;
                num += p * k as f64 * fs / n as f64;
                den += p;
            }
        }
        num / den
    }

    fn zero_crossings(v: &[f64]) -> usize {
        v.windows(2).filter(|w| (w[0] < 0.0) != (w[1] < 0.0)).count()
    }

    #[test]
    fn pools_are_deterministic_and_normalized() {
        let a = gen_sources(SourceKind::ToneChirp, 5, 4, 8000);
        assert_eq!(a, gen_sources(SourceKind::ToneChirp, 5, 4, 8000));
        for w in a.iter().chain(&gen_sources(SourceKind::AmNoise, 5, 4, 8000)) {
            assert!((w.rms() - SOURCE_RMS).abs() < 1e-12);
            assert!((8000..=24000).contains(&w.len()));
        }
        for (i, w) in a.iter().enumerate() {
            assert_eq!(source_len(derive_seed(5, i as u64), 8000), w.len());
        }
    }

    #[test]
    fn kinds_have_different_centroids() {
        let mean = |k| {
            let pool = gen_sources(k, 1, 6, 8000);
            pool.iter().map(centroid).sum::<f64>() / pool.len() as f64
        };
        let (c, n) = (mean(SourceKind::ToneChirp), mean(SourceKind::AmNoise));
        assert!(n > c * 1.5, "chirp {c} Hz, noise {n} Hz");
    }

    #[test]
    fn speed_perturb_contract() {
        let tone = Waveform::new(
            (0..4000)
                .map(|i| (2.0 * PI * 200.0 * i as f64 / 8000.0).sin())
                .collect(),
            8000,
        );
        assert_eq!(speed_perturb(&tone, 1.0).unwrap(), tone);
        for f in [0.95, 1.05, 0.5, 2.0] {
            assert_eq!(speed_perturb(&tone, f).unwrap().len(), (4000.0 / f).round() as usize);
        }
        let zc = |w: &Waveform| zero_crossings(&w.samples) as f64 / w.len() as f64;
        let slow = speed_perturb(&tone, 0.5).unwrap();
        let fast = speed_perturb(&tone, 2.0).unwrap();
        assert!((zc(&slow) / zc(&tone) - 0.5).abs() < 0.02);
        assert!((zc(&fast) / zc(&tone) - 2.0).abs() < 0.02);
        assert!(speed_perturb(&tone, 0.0).is_err());
    }

    #[test]
    fn kind_names_round_trip() {
        for k in SourceKind::ALL {
            assert_eq!(k.to_string().parse::<SourceKind>().unwrap(), k);
        }
    }
}
