use crate::dtcn::config::DtcnConfig;
use crate::dtcn::model::SeparatorModel;
use crate::frames::num_frames;

/// Exact number of scalar parameters; shared block parameters count once.
pub fn count_params(model: &SeparatorModel) -> usize {
    model.params.num_scalars()
}

/// Per-component parameter tally derived from the configuration alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamTally {
    pub encoder: usize,
    pub encoder_norm: usize,
    pub bottleneck: usize,
    /// One block without its offset sub-network.
    pub block: usize,
    pub offset_subnet: usize,
    pub skip_conv: usize,
    pub mask_head: usize,
    pub decoder: usize,
    pub stored_blocks: usize,
}

impl ParamTally {
    pub fn new(cfg: &DtcnConfig) -> Self {
        let (n, b, h, p) = (cfg.n, cfg.b, cfg.h, cfg.p);
        Self {
            encoder: cfg.block_len * n,
            encoder_norm: 2 * n,
            bottleneck: n * b + b,
            block: (b * h + h) + 1 + 2 * h + h * p + 1 + 2 * h + (h * b + b),
            offset_subnet: if cfg.deformable { h * p + (h * p + p) + 1 } else { 0 },
            skip_conv: if cfg.skip_connections { h * b + b } else { 0 },
            mask_head: b * cfg.speakers * n + cfg.speakers * n,
            decoder: n * cfg.block_len,
            stored_blocks: cfg.stored_blocks(),
        }
    }

    pub fn per_block(&self) -> usize {
        self.block + self.offset_subnet + self.skip_conv
    }

    pub fn total(&self) -> usize {
        self.encoder
            + self.encoder_norm
            + self.bottleneck
            + self.stored_blocks * self.per_block()
            + self.mask_head
            + self.decoder
    }
}

/// Multiply-accumulates of one forward pass over `input_len` samples.
///
/// Counts the encoder, every pointwise, depthwise and deformable depthwise
/// convolution (two extra multiplies per deformable tap for the interpolation
/// weights), the offset sub-networks, the mask head and the decoder.
/// Normalizations, activations and the masking product are not counted.
pub fn count_macs(model: &SeparatorModel, input_len: usize) -> u64 {
    macs_for_config(&model.config, input_len)
}

pub fn macs_for_config(cfg: &DtcnConfig, input_len: usize) -> u64 {
    macs_per_frame(cfg) * num_frames(input_len, cfg.block_len) as u64
}

pub fn macs_per_frame(cfg: &DtcnConfig) -> u64 {
    let (n, b, h, p, c, l) = (
        cfg.n as u64,
        cfg.b as u64,
        cfg.h as u64,
        cfg.p as u64,
        cfg.speakers as u64,
        cfg.block_len as u64,
    );
    let mut block = b * h + h * p + h * b;
    if cfg.deformable {
        block += 2 * h * p + h * p + h * p;
    }
    if cfg.skip_connections {
        block += h * b;
    }
    l * n + n * b + cfg.num_blocks() as u64 * block + b * c * n + c * n * l
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DtcnConfig {
        DtcnConfig {
            n: 8,
            b: 4,
            h: 8,
            p: 3,
            block_len: 4,
            x: 2,
            r: 1,
            speakers: 2,
            ..DtcnConfig::toy()
        }
    }

    #[test]
    fn tally_matches_built_model() {
        for deformable in [false, true] {
            for sw in [false, true] {
                for sc in [false, true] {
                    let cfg = DtcnConfig::toy()
                        .with_deformable(deformable)
                        .with_shared_weights(sw)
                        .with_skip_connections(sc);
                    let m = SeparatorModel::build(&cfg, 0).unwrap();
                    assert_eq!(count_params(&m), ParamTally::new(&cfg).total());
                }
            }
        }
    }

    #[test]
    fn tiny_hand_counts() {
        let t = ParamTally::new(&tiny());
        assert_eq!(t.block, 134);
        assert_eq!(t.offset_subnet, 52);
        assert_eq!(t.total(), 568);
        assert_eq!(ParamTally::new(&tiny().with_deformable(false)).total(), 464);
        assert_eq!(macs_for_config(&tiny(), 32), 8400);
        assert_eq!(macs_for_config(&tiny().with_deformable(false), 32), 5520);
    }

    #[test]
    fn macs_scale_with_length() {
        let cfg = DtcnConfig::full(8, 3);
        let a = macs_for_config(&cfg, 8000) as f64;
        let b = macs_for_config(&cfg, 16000) as f64;
        assert!((b / a - 2.0).abs() < 0.02);
    }
}
