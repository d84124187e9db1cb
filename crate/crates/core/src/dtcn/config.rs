use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::frames::DEFAULT_SAMPLE_RATE;

/// Architecture of one separator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DtcnConfig {
    /// Encoder channels.
    pub n: usize,
    /// Bottleneck channels.
    pub b: usize,
    /// Hidden channels inside each block.
    pub h: usize,
    /// Depthwise kernel size.
    pub p: usize,
    /// Encoder block length in samples (hop is half of it).
    pub block_len: usize,
    /// Blocks per stack.
    pub x: usize,
    /// Stack repeats.
    pub r: usize,
    /// Number of speakers.
    pub speakers: usize,
    pub deformable: bool,
    pub shared_weights: bool,
    pub skip_connections: bool,
    pub sample_rate: u32,
}

impl Default for DtcnConfig {
    fn default() -> Self {
        Self::full(8, 3)
    }
}

impl DtcnConfig {
    /// `{N, B, H, P, L} = {512, 128, 512, 3, 16}`, two speakers, deformable.
    pub fn full(x: usize, r: usize) -> Self {
        Self {
            n: 512,
            b: 128,
            h: 512,
            p: 3,
            block_len: 16,
            x,
            r,
            speakers: 2,
            deformable: true,
            shared_weights: false,
            skip_connections: false,
            sample_rate: DEFAULT_SAMPLE_RATE,
        }
    }

    /// Stack layouts `(X, R)` of similar depth for the full-size dimensions.
    pub fn full_layouts() -> [(usize, usize); 5] {
        [(3, 8), (4, 6), (5, 5), (6, 4), (8, 3)]
    }

    /// Small configuration used for desk-scale training.
    pub fn toy() -> Self {
        Self {
            n: 64,
            b: 32,
            h: 64,
            p: 3,
            block_len: 16,
            x: 4,
            r: 2,
            ..Self::full(4, 2)
        }
    }

    pub fn with_deformable(mut self, on: bool) -> Self {
        self.deformable = on;
        self
    }

    pub fn with_shared_weights(mut self, on: bool) -> Self {
        self.shared_weights = on;
        self
    }

    pub fn with_skip_connections(mut self, on: bool) -> Self {
        self.skip_connections = on;
        self
    }

    pub fn num_blocks(&self) -> usize {
        self.x * self.r
    }

    /// Number of distinct block parameter sets.
    pub fn stored_blocks(&self) -> usize {
        if self.shared_weights {
            self.x
        } else {
            self.num_blocks()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n", self.n),
            ("b", self.b),
            ("h", self.h),
            ("p", self.p),
            ("block_len", self.block_len),
            ("x", self.x),
            ("r", self.r),
            ("speakers", self.speakers),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if !self.block_len.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "model.block_len must be even, got {}",
                self.block_len
            )));
        }
        if self.x > 24 {
            return Err(Error::Config(format!(
                "model.x = {} gives an unusable dilation",
                self.x
            )));
        }
        if self.sample_rate == 0 {
            return Err(Error::Config("model.sample_rate must be positive".into()));
        }
        Ok(())
    }

    /// Receptive field of the undeformed stack, in encoder frames.
    pub fn receptive_field_frames(&self) -> usize {
        let per_stack: usize = (0..self.x).map(|i| (self.p - 1) << i).sum();
        self.r * per_stack + 1
    }

    /// Same, in seconds of audio.
    pub fn receptive_field_seconds(&self) -> f64 {
        let frames = self.receptive_field_frames();
        let samples = (frames - 1) * self.block_len / 2 + self.block_len;
        samples as f64 / self.sample_rate as f64
    }

    /// `key=value` lines, the form embedded in checkpoints.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.kv_pairs() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    fn kv_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n", self.n.to_string()),
            ("b", self.b.to_string()),
            ("h", self.h.to_string()),
            ("p", self.p.to_string()),
            ("block_len", self.block_len.to_string()),
            ("x", self.x.to_string()),
            ("r", self.r.to_string()),
            ("speakers", self.speakers.to_string()),
            ("deformable", self.deformable.to_string()),
            ("shared_weights", self.shared_weights.to_string()),
            ("skip_connections", self.skip_connections.to_string()),
            ("sample_rate", self.sample_rate.to_string()),
        ]
    }

    /// Inverse of [`DtcnConfig::to_kv`]; every key must be present exactly once.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed config line {line:?}")))?;
            let bad = |_| Error::Config(format!("bad value for {k}: {v:?}"));
            let bad_b = |_| Error::Config(format!("bad value for {k}: {v:?}"));
            match k {
                "n" => cfg.n = v.parse().map_err(bad)?,
                "b" => cfg.b = v.parse().map_err(bad)?,
                "h" => cfg.h = v.parse().map_err(bad)?,
                "p" => cfg.p = v.parse().map_err(bad)?,
                "block_len" => cfg.block_len = v.parse().map_err(bad)?,
                "x" => cfg.x = v.parse().map_err(bad)?,
                "r" => cfg.r = v.parse().map_err(bad)?,
                "speakers" => cfg.speakers = v.parse().map_err(bad)?,
                "deformable" => cfg.deformable = v.parse().map_err(bad_b)?,
                "shared_weights" => cfg.shared_weights = v.parse().map_err(bad_b)?,
                "skip_connections" => cfg.skip_connections = v.parse().map_err(bad_b)?,
                "sample_rate" => {
                    cfg.sample_rate = v
                        .parse()
                        .map_err(|_| Error::Config(format!("bad value for {k}: {v:?}")))?
                }
                other => return Err(Error::Config(format!("unknown model key {other:?}"))),
            }
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("duplicate model key {k:?}")));
            }
        }
        if seen.len() != cfg.kv_pairs().len() {
            return Err(Error::Config("incomplete model configuration".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Dilation factors of one stack: `1, 2, 4, ..., 2^(X-1)`.
pub fn dilation_schedule(x: usize) -> Result<Vec<usize>> {
    if x == 0 {
        return Err(Error::InvalidArgument("dilation schedule needs X >= 1".into()));
    }
    Ok((0..x).map(|i| 1usize << i).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules() {
        assert_eq!(dilation_schedule(4).unwrap(), vec![1, 2, 4, 8]);
        assert_eq!(dilation_schedule(1).unwrap(), vec![1]);
        assert_eq!(dilation_schedule(8).unwrap(), vec![1, 2, 4, 8, 16, 32, 64, 128]);
        assert!(dilation_schedule(0).is_err());
    }

    #[test]
    fn kv_round_trip() {
        let cfg = DtcnConfig::toy().with_shared_weights(true);
        assert_eq!(DtcnConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        assert!(DtcnConfig::from_kv("n=3\n").is_err());
        assert!(DtcnConfig::from_kv(&format!("{}bogus=1\n", cfg.to_kv())).is_err());
    }

    #[test]
    fn receptive_fields_of_full_layouts() {
        // {8,3}: 3 * 2 * 255 + 1 frames, about 1.53 s at 8 kHz.
        let cfg = DtcnConfig::full(8, 3);
        assert_eq!(cfg.receptive_field_frames(), 1531);
        assert!((cfg.receptive_field_seconds() - 1.53).abs() < 0.01);
        let rf: Vec<f64> = DtcnConfig::full_layouts()
            .iter()
            .map(|&(x, r)| DtcnConfig::full(x, r).receptive_field_seconds())
            .collect();
        assert!(rf.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn validation() {
        let mut cfg = DtcnConfig::toy();
        cfg.block_len = 15;
        assert!(cfg.validate().is_err());
        cfg.block_len = 16;
        cfg.h = 0;
        assert!(cfg.validate().is_err());
    }
}
