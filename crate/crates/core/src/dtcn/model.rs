use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dtcn::config::{dilation_schedule, DtcnConfig};
use crate::error::Result;
use crate::numcore::{ParamId, ParamStore, Tensor};

pub const PRELU_INIT: f64 = 0.25;

/// Offset sub-network: depthwise conv (P taps, block dilation) over the H
/// hidden channels, pointwise conv H -> P, PReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OffsetParams {
    pub depthwise: ParamId,
    pub pointwise_w: ParamId,
    pub pointwise_b: ParamId,
    pub slope: ParamId,
}

/// One convolutional block: P-Conv (B -> H), PReLU, gLN, depthwise or
/// deformable depthwise conv, PReLU, gLN, P-Conv (H -> B), plus a residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvBlockParams {
    pub in_w: ParamId,
    pub in_b: ParamId,
    pub slope1: ParamId,
    pub norm1_gain: ParamId,
    pub norm1_bias: ParamId,
    pub depthwise: ParamId,
    pub slope2: ParamId,
    pub norm2_gain: ParamId,
    pub norm2_bias: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub skip: Option<(ParamId, ParamId)>,
    pub offsets: Option<OffsetParams>,
}

/// Position of one block in the network: which stored parameter set it uses
/// and its dilation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSlot {
    pub stored: usize,
    pub dilation: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparatorModel {
    pub config: DtcnConfig,
    pub params: ParamStore,
    pub encoder: ParamId,
    pub decoder: ParamId,
    pub cln_gain: ParamId,
    pub cln_bias: ParamId,
    pub bottleneck_w: ParamId,
    pub bottleneck_b: ParamId,
    /// Distinct block parameter sets: `X` with shared weights, `X * R` otherwise.
    pub blocks: Vec<ConvBlockParams>,
    /// All `X * R` blocks in execution order.
    pub schedule: Vec<BlockSlot>,
    pub mask_w: ParamId,
    pub mask_b: ParamId,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let t = Tensor::uniform(shape, bound, &mut self.rng);
        self.store.insert(name, t)
    }

    fn constant(&mut self, name: String, shape: &[usize], v: f64) -> Result<ParamId> {
        self.store.insert(name, Tensor::full(shape, v))
    }

    fn linear(&mut self, prefix: &str, c_in: usize, c_out: usize) -> Result<(ParamId, ParamId)> {
        let w = self.uniform(format!("{prefix}.weight"), &[c_in, c_out], c_in)?;
        let b = self.uniform(format!("{prefix}.bias"), &[c_out], c_in)?;
        Ok((w, b))
    }

    fn norm(&mut self, prefix: &str, c: usize) -> Result<(ParamId, ParamId)> {
        let g = self.constant(format!("{prefix}.gain"), &[c], 1.0)?;
        let b = self.constant(format!("{prefix}.bias"), &[c], 0.0)?;
        Ok((g, b))
    }
}

/// Encoder `[L, N]` and decoder `[N, L]` such that decoding the encoder's
/// ReLU output recovers each frame exactly: the encoder holds `N/2` filters
/// with orthonormal rows and their negations, the decoder their transposes.
/// Falls back to independent uniform draws when `N < 2L` or `N` is odd.
fn paired_basis(l: usize, n: usize, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let half = n / 2;
    if !n.is_multiple_of(2) || half < l {
        let enc = Tensor::uniform(&[l, n], 1.0 / (l as f64).sqrt(), rng);
        let dec = Tensor::uniform(&[n, l], 1.0 / (n as f64).sqrt(), rng);
        return (enc, dec);
    }
    // Modified Gram-Schmidt over L random rows of length N/2.
    let mut rows: Vec<Vec<f64>> = (0..l).map(|_| Tensor::randn(&[half], rng).into_vec()).collect();
    for i in 0..l {
        for j in 0..i {
            let d: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            let (lo, hi) = rows.split_at_mut(i);
            hi[0].iter_mut().zip(&lo[j]).for_each(|(a, b)| *a -= d * b);
        }
        let norm = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        rows[i].iter_mut().for_each(|v| *v /= norm);
    }
    let mut enc = Tensor::zeros(&[l, n]);
    let mut dec = Tensor::zeros(&[n, l]);
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            enc.data_mut()[i * n + j] = v;
            enc.data_mut()[i * n + half + j] = -v;
            dec.data_mut()[j * l + i] = v;
            dec.data_mut()[(half + j) * l + i] = -v;
        }
    }
    (enc, dec)
}

impl SeparatorModel {
    /// Builds and initializes a separator; identical seeds give identical models.
    ///
    /// Convolution weights are uniform in `±1/sqrt(fan_in)`, PReLU slopes
    /// start at 0.25 and norms at unit gain / zero bias. The decoder inverts
    /// the encoder (see [`paired_basis`]) and the mask head starts at weight 0,
    /// bias `1/C`, so a fresh model returns `x / C` for every speaker. The
    /// last pointwise layer of every offset sub-network starts at zero, so
    /// offsets start at exactly 0.
    pub fn build(config: &DtcnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let cfg = *config;
        let mut store = ParamStore::new(seed);
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };

        let (enc_t, dec_t) = paired_basis(cfg.block_len, cfg.n, &mut init.rng);
        let encoder = init.store.insert("encoder.weight", enc_t)?;
        let (cln_gain, cln_bias) = init.norm("encoder_norm", cfg.n)?;
        let (bottleneck_w, bottleneck_b) = init.linear("bottleneck", cfg.n, cfg.b)?;

        let mut blocks = Vec::with_capacity(cfg.stored_blocks());
        for j in 0..cfg.stored_blocks() {
            let pre = format!("blocks.{j}");
            let (in_w, in_b) = init.linear(&format!("{pre}.in_conv"), cfg.b, cfg.h)?;
            let slope1 = init.constant(format!("{pre}.prelu1.slope"), &[1], PRELU_INIT)?;
            let (norm1_gain, norm1_bias) = init.norm(&format!("{pre}.norm1"), cfg.h)?;
            let offsets = if cfg.deformable {
                let depthwise = init.uniform(format!("{pre}.offset.depthwise"), &[cfg.h, cfg.p], cfg.p)?;
                let pointwise_w = init.constant(format!("{pre}.offset.pointwise.weight"), &[cfg.h, cfg.p], 0.0)?;
                let pointwise_b = init.constant(format!("{pre}.offset.pointwise.bias"), &[cfg.p], 0.0)?;
                let slope = init.constant(format!("{pre}.offset.prelu.slope"), &[1], PRELU_INIT)?;
                Some(OffsetParams {
                    depthwise,
                    pointwise_w,
                    pointwise_b,
                    slope,
                })
            } else {
                None
            };
            let depthwise = init.uniform(format!("{pre}.depthwise"), &[cfg.h, cfg.p], cfg.p)?;
            let slope2 = init.constant(format!("{pre}.prelu2.slope"), &[1], PRELU_INIT)?;
            let (norm2_gain, norm2_bias) = init.norm(&format!("{pre}.norm2"), cfg.h)?;
            let (out_w, out_b) = init.linear(&format!("{pre}.out_conv"), cfg.h, cfg.b)?;
            let skip = if cfg.skip_connections {
                Some(init.linear(&format!("{pre}.skip_conv"), cfg.h, cfg.b)?)
            } else {
                None
            };
            blocks.push(ConvBlockParams {
                in_w,
                in_b,
                slope1,
                norm1_gain,
                norm1_bias,
                depthwise,
                slope2,
                norm2_gain,
                norm2_bias,
                out_w,
                out_b,
                skip,
                offsets,
            });
        }

        let mask_w = init.constant("mask_conv.weight".into(), &[cfg.b, cfg.speakers * cfg.n], 0.0)?;
        let mask_b = init.constant(
            "mask_conv.bias".into(),
            &[cfg.speakers * cfg.n],
            1.0 / cfg.speakers as f64,
        )?;
        let decoder = init.store.insert("decoder.weight", dec_t)?;

        let dilations = dilation_schedule(cfg.x)?;
        let schedule = (0..cfg.r)
            .flat_map(|rep| {
                dilations.iter().enumerate().map(move |(i, &d)| BlockSlot {
                    stored: if cfg.shared_weights { i } else { rep * cfg.x + i },
                    dilation: d,
                })
            })
            .collect();

        Ok(Self {
            config: cfg,
            params: store,
            encoder,
            decoder,
            cln_gain,
            cln_bias,
            bottleneck_w,
            bottleneck_b,
            blocks,
            schedule,
            mask_w,
            mask_b,
        })
    }

    pub fn block_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.blocks.iter().flat_map(|b| {
            let mut v = vec![
                b.in_w,
                b.in_b,
                b.slope1,
                b.norm1_gain,
                b.norm1_bias,
                b.depthwise,
                b.slope2,
                b.norm2_gain,
                b.norm2_bias,
                b.out_w,
                b.out_b,
            ];
            if let Some((w, bb)) = b.skip {
                v.extend([w, bb]);
            }
            if let Some(o) = b.offsets {
                v.extend([o.depthwise, o.pointwise_w, o.pointwise_b, o.slope]);
            }
            v
        })
    }

    /// Overwrites the parameters of `self` that have a same-named, same-shaped
    /// counterpart in `other`. Returns how many tensors were copied.
    pub fn copy_matching_params(&mut self, other: &SeparatorModel) -> usize {
        let mut copied = 0;
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            let name = self.params.name(id).to_string();
            if let Some(src) = other.params.id(&name) {
                let t = other.params.get(src);
                if t.shape() == self.params.get(id).shape() {
                    *self.params.get_mut(id) = t.clone();
                    copied += 1;
                }
            }
        }
        copied
    }
}
