//! Line-oriented manifests that pin down every random choice of a mixture set.
//!
//! ```text
//! # dtcn-manifest v1
//! # seed=7 count=2 speakers=2 length=8000 ...
//! id=0 rate=8000 len=8000 delay=4 tail=0.05 src=chirp:123:10:1,amnoise:456:0:1.05 rir=0.25:11,0.3:12 mix_snr=2.5 noise=-3.1:777
//! ```

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frames::{Waveform, DEFAULT_SAMPLE_RATE};
use crate::mixsim::sources::{gen_source, noise_signal, source_len, speed_perturb, SourceKind};
use crate::mixsim::{derive_seed, gen_rir, mix, MixtureExample, RirSpec, DEFAULT_TAIL_GAIN};

const HEADER: &str = "# dtcn-manifest v1";
const SPEEDS: [f64; 3] = [0.95, 1.0, 1.05];

/// How speaker kinds are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pairing {
    /// Every speaker draws its kind independently.
    Any,
    /// The two kinds alternate across speakers, in random order.
    Cross,
}

/// Parameters of a simulated mixture set.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub count: usize,
    pub speakers: usize,
    /// Mixture length in samples.
    pub length: usize,
    pub sample_rate: u32,
    pub t60_min: f64,
    pub t60_max: f64,
    pub mix_snr_min: f64,
    pub mix_snr_max: f64,
    pub noise: bool,
    pub noise_snr_min: f64,
    pub noise_snr_max: f64,
    pub direct_delay: usize,
    pub tail_gain: f64,
    pub speed_perturb: bool,
    pub pairing: Pairing,
    /// Sources per kind in the pool that examples draw from.
    pub pool_size: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            count: 100,
            speakers: 2,
            length: DEFAULT_SAMPLE_RATE as usize,
            sample_rate: DEFAULT_SAMPLE_RATE,
            t60_min: 0.1,
            t60_max: 0.4,
            mix_snr_min: 0.0,
            mix_snr_max: 5.0,
            noise: true,
            noise_snr_min: -6.0,
            noise_snr_max: 3.0,
            direct_delay: 4,
            tail_gain: DEFAULT_TAIL_GAIN,
            speed_perturb: false,
            pairing: Pairing::Any,
            pool_size: 100,
        }
    }
}

/// Widest SNR range accepted from configuration, in dB.
pub const SNR_LIMIT_DB: f64 = 20.0;

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.speakers == 0 || self.length == 0 || self.sample_rate == 0 || self.pool_size == 0 {
            return bad("data.speakers, data.length, data.sample_rate and data.pool_size must be positive".into());
        }
        if self.pairing == Pairing::Any && self.pool_size * 2 < self.speakers {
            return bad("data.pool_size too small for the speaker count".into());
        }
        if self.pairing == Pairing::Cross && self.pool_size * 2 < self.speakers + 1 {
            return bad("data.pool_size too small for the speaker count".into());
        }
        if !(0.0 <= self.t60_min && self.t60_min <= self.t60_max && self.t60_max.is_finite()) {
            return bad(format!(
                "data.t60 range [{}, {}] is invalid",
                self.t60_min, self.t60_max
            ));
        }
        for (name, lo, hi) in [
            ("mix_snr", self.mix_snr_min, self.mix_snr_max),
            ("noise_snr", self.noise_snr_min, self.noise_snr_max),
        ] {
            if !(lo <= hi) || lo < -SNR_LIMIT_DB || hi > SNR_LIMIT_DB {
                return bad(format!(
                    "data.{name} range [{lo}, {hi}] must be ordered and within +/-{SNR_LIMIT_DB} dB"
                ));
            }
        }
        if !(self.tail_gain >= 0.0 && self.tail_gain.is_finite()) {
            return bad(format!("data.tail_gain must be >= 0, got {}", self.tail_gain));
        }
        Ok(())
    }

    fn to_tokens(&self) -> String {
        format!(
            "count={} speakers={} length={} sample_rate={} t60_min={} t60_max={} mix_snr_min={} mix_snr_max={} \
             noise={} noise_snr_min={} noise_snr_max={} direct_delay={} tail_gain={} speed_perturb={} pairing={} pool_size={}",
            self.count,
            self.speakers,
            self.length,
            self.sample_rate,
            self.t60_min,
            self.t60_max,
            self.mix_snr_min,
            self.mix_snr_max,
            self.noise,
            self.noise_snr_min,
            self.noise_snr_max,
            self.direct_delay,
            self.tail_gain,
            self.speed_perturb,
            match self.pairing {
                Pairing::Any => "any",
                Pairing::Cross => "cross",
            },
            self.pool_size
        )
    }

    fn from_tokens<'a>(tokens: impl Iterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut c = SimConfig::default();
        for (k, v) in tokens {
            match k {
                "count" => c.count = num(k, v)?,
                "speakers" => c.speakers = num(k, v)?,
                "length" => c.length = num(k, v)?,
                "sample_rate" => c.sample_rate = num(k, v)?,
                "t60_min" => c.t60_min = num(k, v)?,
                "t60_max" => c.t60_max = num(k, v)?,
                "mix_snr_min" => c.mix_snr_min = num(k, v)?,
                "mix_snr_max" => c.mix_snr_max = num(k, v)?,
                "noise" => c.noise = num(k, v)?,
                "noise_snr_min" => c.noise_snr_min = num(k, v)?,
                "noise_snr_max" => c.noise_snr_max = num(k, v)?,
                "direct_delay" => c.direct_delay = num(k, v)?,
                "tail_gain" => c.tail_gain = num(k, v)?,
                "speed_perturb" => c.speed_perturb = num(k, v)?,
                "pairing" => {
                    c.pairing = match v {
                        "any" => Pairing::Any,
                        "cross" => Pairing::Cross,
                        _ => return Err(Error::Config(format!("bad pairing {v:?}"))),
                    }
                }
                "pool_size" => c.pool_size = num(k, v)?,
                "seed" => {}
                other => return Err(Error::Config(format!("unknown manifest header key {other:?}"))),
            }
        }
        Ok(c)
    }
}

fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value for {k}: {v:?}")))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceRef {
    pub kind: SourceKind,
    pub seed: u64,
    /// First sample of the crop, after speed perturbation.
    pub offset: usize,
    pub speed: f64,
}

/// Everything needed to regenerate one mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleSpec {
    pub id: usize,
    pub sample_rate: u32,
    pub length: usize,
    pub direct_delay: usize,
    pub tail_gain: f64,
    pub sources: Vec<SourceRef>,
    /// `(t60, seed)` per speaker.
    pub rirs: Vec<(f64, u64)>,
    pub mix_snr: f64,
    /// `(snr, seed)` when noise is present.
    pub noise: Option<(f64, u64)>,
}

impl ExampleSpec {
    pub fn realize(&self) -> Result<MixtureExample> {
        let mut srcs = Vec::with_capacity(self.sources.len());
        for r in &self.sources {
            let mut w = gen_source(r.kind, r.seed, self.sample_rate);
            if r.speed != 1.0 {
                w = speed_perturb(&w, r.speed)?;
            }
            let start = r.offset.min(w.len());
            let end = (start + self.length).min(w.len());
            srcs.push(Waveform::new(w.samples[start..end].to_vec(), self.sample_rate));
        }
        let rirs = self
            .rirs
            .iter()
            .map(|&(t60, seed)| {
                let mut spec = RirSpec::covering(t60, self.direct_delay, seed, self.sample_rate);
                spec.tail_gain = self.tail_gain;
                gen_rir(&spec)
            })
            .collect::<Result<Vec<_>>>()?;
        let noise = self
            .noise
            .map(|(snr, seed)| (noise_signal(seed, self.length, self.sample_rate), snr));
        let mut ex = mix(&srcs, &rirs, noise.as_ref().map(|(n, s)| (n, *s)), self.mix_snr)?;
        ex.meta.t60 = self.rirs.iter().map(|r| r.0).collect();
        ex.meta.seeds = self
            .sources
            .iter()
            .map(|s| s.seed)
            .chain(self.rirs.iter().map(|r| r.1))
            .collect();
        ex.meta.seeds.extend(self.noise.map(|n| n.1));
        Ok(ex)
    }

    fn to_line(&self) -> String {
        let src = self
            .sources
            .iter()
            .map(|s| format!("{}:{}:{}:{}", s.kind, s.seed, s.offset, s.speed))
            .collect::<Vec<_>>()
            .join(",");
        let rir = self
            .rirs
            .iter()
            .map(|(t, s)| format!("{t}:{s}"))
            .collect::<Vec<_>>()
            .join(",");
        let noise = match self.noise {
            Some((snr, seed)) => format!("{snr}:{seed}"),
            None => "none".into(),
        };
        format!(
            "id={} rate={} len={} delay={} tail={} src={src} rir={rir} mix_snr={} noise={noise}",
            self.id, self.sample_rate, self.length, self.direct_delay, self.tail_gain, self.mix_snr
        )
    }

    fn parse_line(line: &str) -> Result<Self> {
        let mut spec = ExampleSpec {
            id: 0,
            sample_rate: 0,
            length: 0,
            direct_delay: 0,
            tail_gain: 0.0,
            sources: Vec::new(),
            rirs: Vec::new(),
            mix_snr: 0.0,
            noise: None,
        };
        let mut seen = 0u32;
        for tok in line.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed manifest token {tok:?}")))?;
            let bit = match k {
                "id" => {
                    spec.id = num(k, v)?;
                    1
                }
                "rate" => {
                    spec.sample_rate = num(k, v)?;
                    2
                }
                "len" => {
                    spec.length = num(k, v)?;
                    4
                }
                "delay" => {
                    spec.direct_delay = num(k, v)?;
                    8
                }
                "tail" => {
                    spec.tail_gain = num(k, v)?;
                    16
                }
                "src" => {
                    for part in v.split(',') {
                        let f: Vec<&str> = part.split(':').collect();
                        if f.len() != 4 {
                            return Err(Error::Config(format!("bad source {part:?}")));
                        }
                        spec.sources.push(SourceRef {
                            kind: f[0].parse()?,
                            seed: num(k, f[1])?,
                            offset: num(k, f[2])?,
                            speed: num(k, f[3])?,
                        });
                    }
                    32
                }
                "rir" => {
                    for part in v.split(',') {
                        let (t, s) = part
                            .split_once(':')
                            .ok_or_else(|| Error::Config(format!("bad rir {part:?}")))?;
                        spec.rirs.push((num(k, t)?, num(k, s)?));
                    }
                    64
                }
                "mix_snr" => {
                    spec.mix_snr = num(k, v)?;
                    128
                }
                "noise" => {
                    if v != "none" {
                        let (s, seed) = v
                            .split_once(':')
                            .ok_or_else(|| Error::Config(format!("bad noise {v:?}")))?;
                        spec.noise = Some((num(k, s)?, num(k, seed)?));
                    }
                    256
                }
                other => return Err(Error::Config(format!("unknown manifest key {other:?}"))),
            };
            if seen & bit != 0 {
                return Err(Error::Config(format!("duplicate manifest key {k:?}")));
            }
            seen |= bit;
        }
        if seen != 511 {
            return Err(Error::Config(format!("incomplete manifest line {line:?}")));
        }
        if spec.rirs.len() != spec.sources.len() {
            return Err(Error::Config(format!("line {}: source and rir counts differ", spec.id)));
        }
        Ok(spec)
    }
}

/// An ordered set of example descriptors plus the configuration that drew them.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Seeds the source pool; kept across dynamic remixes.
    pub seed: u64,
    pub config: SimConfig,
    pub entries: Vec<ExampleSpec>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Regenerates every example, in parallel, in manifest order.
    pub fn realize_all(&self) -> Result<Vec<MixtureExample>> {
        self.entries.par_iter().map(ExampleSpec::realize).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{HEADER}\n# seed={} {}\n", self.seed, self.config.to_tokens());
        for e in &self.entries {
            let _ = writeln!(s, "{}", e.to_line());
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(HEADER) {
            return Err(Error::Config("missing manifest header".into()));
        }
        let meta = lines
            .next()
            .and_then(|l| l.strip_prefix("# "))
            .ok_or_else(|| Error::Config("missing manifest configuration line".into()))?;
        let pairs = meta
            .split_whitespace()
            .map(|t| {
                t.split_once('=')
                    .ok_or_else(|| Error::Config(format!("malformed header token {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let seed = pairs
            .iter()
            .find(|(k, _)| *k == "seed")
            .map(|(_, v)| num("seed", v))
            .transpose()?
            .ok_or_else(|| Error::Config("manifest header lacks seed".into()))?;
        let config = SimConfig::from_tokens(pairs.into_iter())?;
        let entries = lines
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(ExampleSpec::parse_line)
            .collect::<Result<Vec<_>>>()?;
        Ok(Manifest { seed, config, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

fn pool_seed(base: u64, kind: SourceKind, index: usize) -> u64 {
    derive_seed(derive_seed(base, 0x5EED_0000 + kind as u64), index as u64)
}

fn draw_entries(cfg: &SimConfig, base: u64, draw: u64) -> Vec<ExampleSpec> {
    (0..cfg.count)
        .map(|id| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(draw, id as u64));
            let kinds: Vec<SourceKind> = match cfg.pairing {
                Pairing::Any => (0..cfg.speakers)
                    .map(|_| *SourceKind::ALL.choose(&mut rng).expect("two kinds"))
                    .collect(),
                Pairing::Cross => {
                    let flip = rng.gen_range(0..2);
                    (0..cfg.speakers).map(|c| SourceKind::ALL[(c + flip) % 2]).collect()
                }
            };
            let mut used: Vec<(SourceKind, usize)> = Vec::new();
            let sources = kinds
                .iter()
                .map(|&kind| {
                    let idx = loop {
                        let i = rng.gen_range(0..cfg.pool_size);
                        if !used.contains(&(kind, i)) {
                            break i;
                        }
                    };
                    used.push((kind, idx));
                    let seed = pool_seed(base, kind, idx);
                    let speed = if cfg.speed_perturb {
                        *SPEEDS.choose(&mut rng).expect("speeds")
                    } else {
                        1.0
                    };
                    let len = (source_len(seed, cfg.sample_rate) as f64 / speed).round() as usize;
                    let offset = if len > cfg.length {
                        rng.gen_range(0..=len - cfg.length)
                    } else {
                        0
                    };
                    SourceRef {
                        kind,
                        seed,
                        offset,
                        speed,
                    }
                })
                .collect();
            let rirs = (0..cfg.speakers)
                .map(|_| {
                    let t60 = if cfg.t60_max > cfg.t60_min {
                        rng.gen_range(cfg.t60_min..=cfg.t60_max)
                    } else {
                        cfg.t60_min
                    };
                    (t60, rng.gen())
                })
                .collect();
            let mix_snr = uniform(&mut rng, cfg.mix_snr_min, cfg.mix_snr_max);
            let noise_draw = (uniform(&mut rng, cfg.noise_snr_min, cfg.noise_snr_max), rng.gen());
            ExampleSpec {
                id,
                sample_rate: cfg.sample_rate,
                length: cfg.length,
                direct_delay: cfg.direct_delay,
                tail_gain: cfg.tail_gain,
                sources,
                rirs,
                mix_snr,
                noise: cfg.noise.then_some(noise_draw),
            }
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Draws a manifest whose every example is reproducible from its own line.
pub fn simulate_manifest(cfg: &SimConfig, seed: u64) -> Result<Manifest> {
    cfg.validate()?;
    Ok(Manifest {
        seed,
        config: cfg.clone(),
        entries: draw_entries(cfg, seed, seed),
    })
}

/// Fresh pairings, SNRs and room seeds over the same source pool, derived
/// from `(manifest.seed, epoch)`.
pub fn dynamic_remix(manifest: &Manifest, epoch: u64) -> Manifest {
    let draw = derive_seed(manifest.seed, 0xD1_0000_0000 + epoch);
    Manifest {
        seed: manifest.seed,
        config: manifest.config.clone(),
        entries: draw_entries(&manifest.config, manifest.seed, draw),
    }
}
