//! Forward and backward passes of the separator.
//!
//! Every forward pass records what its backward pass needs in a cache, and the
//! backward pass walks the blocks in reverse, visiting each exactly once.

use crate::deformconv::{dconv, dconv_backward, ddconv, ddconv_backward, DepthwiseKernel, OffsetField, Padding};
use crate::dtcn::model::{ConvBlockParams, OffsetParams, SeparatorModel};
use crate::error::{Error, Result};
use crate::frames::{
    apply_mask, apply_mask_backward, decode, decode_backward, encode, encode_backward, overlap_add,
    overlap_add_backward, segment, EncodedSeq, FrameMatrix, Waveform,
};
use crate::numcore::{
    channel_linear, channel_linear_backward, cumulative_layer_norm, cumulative_layer_norm_backward, global_layer_norm,
    global_layer_norm_backward, prelu, prelu_backward, relu, relu_backward, ClnCache, GlnCache, Grads, ParamStore,
    Tensor,
};

#[derive(Debug, Clone)]
struct OffsetCache {
    depthwise_out: Tensor,
    pre_act: Tensor,
    tau: OffsetField,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    input: Tensor,
    hidden_pre: Tensor,
    norm1: GlnCache,
    norm1_out: Tensor,
    offsets: Option<OffsetCache>,
    conv_out: Tensor,
    norm2: GlnCache,
    norm2_out: Tensor,
    dilation: usize,
}

impl BlockCache {
    pub fn offsets(&self) -> Option<&OffsetField> {
        self.offsets.as_ref().map(|o| &o.tau)
    }
}

/// Output of one block: the residual stream and, with skip connections, the skip branch.
#[derive(Debug, Clone)]
pub struct BlockOutput {
    pub residual: Tensor,
    pub skip: Option<Tensor>,
}

/// Runs the offset sub-network on the block's normalized hidden activations
/// `[H, L]`, giving offsets `[L, P]`.
pub fn offset_subnet(h: &Tensor, params: &ParamStore, op: &OffsetParams, dilation: usize) -> Result<OffsetField> {
    Ok(offset_forward(h, params, op, dilation)?.tau)
}

fn offset_forward(h: &Tensor, params: &ParamStore, op: &OffsetParams, dilation: usize) -> Result<OffsetCache> {
    let k = DepthwiseKernel::new(params.get(op.depthwise).clone(), dilation)?;
    let depthwise_out = dconv(h, &k, Padding::Same)?;
    let pre_act = channel_linear(&depthwise_out, params.get(op.pointwise_w), params.get(op.pointwise_b))?;
    let tau = prelu(&pre_act, params.get(op.slope))?.transpose2()?;
    Ok(OffsetCache {
        depthwise_out,
        pre_act,
        tau: OffsetField { tau },
    })
}

fn offset_backward(
    h: &Tensor,
    params: &ParamStore,
    op: &OffsetParams,
    cache: &OffsetCache,
    dilation: usize,
    gtau: &Tensor,
    grads: &mut Grads,
) -> Result<Tensor> {
    let g_act = gtau.transpose2()?;
    let g_pre = prelu_backward(&cache.pre_act, params.get(op.slope), &g_act, grads.get_mut(op.slope))?;
    let (gw, gb) = two_mut(grads, op.pointwise_w.index(), op.pointwise_b.index());
    let g_dw = channel_linear_backward(&cache.depthwise_out, params.get(op.pointwise_w), &g_pre, gw, gb)?;
    let k = DepthwiseKernel::new(params.get(op.depthwise).clone(), dilation)?;
    dconv_backward(h, &k, Padding::Same, &g_dw, grads.get_mut(op.depthwise))
}

fn two_mut(grads: &mut Grads, a: usize, b: usize) -> (&mut Tensor, &mut Tensor) {
    assert_ne!(a, b);
    let slots = grads.slots_mut();
    if a < b {
        let (lo, hi) = slots.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = slots.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}

/// One convolutional block with its residual connection, `z + block(z)`.
pub fn conv_block(
    z: &Tensor,
    params: &ParamStore,
    bp: &ConvBlockParams,
    dilation: usize,
) -> Result<(BlockOutput, BlockCache)> {
    let (b_ch, _) = z.dims2()?;
    let (w_in, _) = params.get(bp.in_w).dims2()?;
    if w_in != b_ch {
        return Err(Error::dim("conv_block", format!("{w_in} channels"), b_ch));
    }
    let hidden_pre = channel_linear(z, params.get(bp.in_w), params.get(bp.in_b))?;
    let act1 = prelu(&hidden_pre, params.get(bp.slope1))?;
    let (norm1_out, norm1) = global_layer_norm(&act1, params.get(bp.norm1_gain), params.get(bp.norm1_bias))?;

    let k = DepthwiseKernel::new(params.get(bp.depthwise).clone(), dilation)?;
    let (conv_out, offsets) = match &bp.offsets {
        Some(op) => {
            let oc = offset_forward(&norm1_out, params, op, dilation)?;
            (ddconv(&norm1_out, &k, &oc.tau, Padding::Same)?, Some(oc))
        }
        None => (dconv(&norm1_out, &k, Padding::Same)?, None),
    };
    let act2 = prelu(&conv_out, params.get(bp.slope2))?;
    let (norm2_out, norm2) = global_layer_norm(&act2, params.get(bp.norm2_gain), params.get(bp.norm2_bias))?;
    let mut residual = channel_linear(&norm2_out, params.get(bp.out_w), params.get(bp.out_b))?;
    for (r, &zv) in residual.data_mut().iter_mut().zip(z.data()) {
        *r += zv;
    }
    let skip = match bp.skip {
        Some((w, b)) => Some(channel_linear(&norm2_out, params.get(w), params.get(b))?),
        None => None,
    };
    Ok((
        BlockOutput { residual, skip },
        BlockCache {
            input: z.clone(),
            hidden_pre,
            norm1,
            norm1_out,
            offsets,
            conv_out,
            norm2,
            norm2_out,
            dilation,
        },
    ))
}

/// Returns the gradient with respect to the block input; parameter gradients
/// are added into `grads`.
pub fn conv_block_backward(
    params: &ParamStore,
    bp: &ConvBlockParams,
    cache: &BlockCache,
    g_residual: &Tensor,
    g_skip: Option<&Tensor>,
    grads: &mut Grads,
) -> Result<Tensor> {
    let (gw, gb) = two_mut(grads, bp.out_w.index(), bp.out_b.index());
    let mut g_n2 = channel_linear_backward(&cache.norm2_out, params.get(bp.out_w), g_residual, gw, gb)?;
    if let (Some((w, b)), Some(gs)) = (bp.skip, g_skip) {
        let (gw, gb) = two_mut(grads, w.index(), b.index());
        let extra = channel_linear_backward(&cache.norm2_out, params.get(w), gs, gw, gb)?;
        g_n2.axpy(1.0, &extra)?;
    }
    let (gg, gbias) = two_mut(grads, bp.norm2_gain.index(), bp.norm2_bias.index());
    let g_act2 = global_layer_norm_backward(&cache.norm2, params.get(bp.norm2_gain), &g_n2, gg, gbias)?;
    let g_conv = prelu_backward(
        &cache.conv_out,
        params.get(bp.slope2),
        &g_act2,
        grads.get_mut(bp.slope2),
    )?;

    let k = DepthwiseKernel::new(params.get(bp.depthwise).clone(), cache.dilation)?;
    let g_n1 = match (&bp.offsets, &cache.offsets) {
        (Some(op), Some(oc)) => {
            let dd = ddconv_backward(&cache.norm1_out, &k, &oc.tau, Padding::Same, &g_conv)?;
            grads.get_mut(bp.depthwise).axpy(1.0, &dd.kernel)?;
            let mut g = dd.y;
            let via_offsets = offset_backward(&cache.norm1_out, params, op, oc, cache.dilation, &dd.tau, grads)?;
            g.axpy(1.0, &via_offsets)?;
            g
        }
        _ => dconv_backward(
            &cache.norm1_out,
            &k,
            Padding::Same,
            &g_conv,
            grads.get_mut(bp.depthwise),
        )?,
    };

    let (gg, gbias) = two_mut(grads, bp.norm1_gain.index(), bp.norm1_bias.index());
    let g_act1 = global_layer_norm_backward(&cache.norm1, params.get(bp.norm1_gain), &g_n1, gg, gbias)?;
    let g_hidden = prelu_backward(
        &cache.hidden_pre,
        params.get(bp.slope1),
        &g_act1,
        grads.get_mut(bp.slope1),
    )?;
    let (gw, gb) = two_mut(grads, bp.in_w.index(), bp.in_b.index());
    let mut gz = channel_linear_backward(&cache.input, params.get(bp.in_w), &g_hidden, gw, gb)?;
    gz.axpy(1.0, g_residual)?;
    Ok(gz)
}

/// Everything a separator forward pass leaves behind for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input_len: usize,
    frames: FrameMatrix,
    encoded: EncodedSeq,
    cln: ClnCache,
    cln_out: Tensor,
    blocks: Vec<BlockCache>,
    mask_in: Tensor,
    mask_pre: Tensor,
    masks: Vec<EncodedSeq>,
    masked: Vec<EncodedSeq>,
}

impl ForwardCache {
    pub fn encoded(&self) -> &EncodedSeq {
        &self.encoded
    }

    pub fn masks(&self) -> &[EncodedSeq] {
        &self.masks
    }

    /// Offsets of every block in execution order (`None` for non-deformable blocks).
    pub fn offsets(&self) -> impl Iterator<Item = Option<&OffsetField>> {
        self.blocks.iter().map(BlockCache::offsets)
    }
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub estimates: Vec<Waveform>,
    pub cache: ForwardCache,
}

impl SeparatorModel {
    /// Runs the mask network on encoded features and returns the masking
    /// network's intermediate state.
    fn mask_network(
        &self,
        w: &EncodedSeq,
    ) -> Result<(ClnCache, Tensor, Vec<BlockCache>, Tensor, Tensor, Vec<EncodedSeq>)> {
        let cfg = &self.config;
        let p = &self.params;
        if w.channels() != cfg.n {
            return Err(Error::dim(
                "estimate_masks",
                format!("{} channels", cfg.n),
                w.channels(),
            ));
        }
        let (cln_out, cln) = cumulative_layer_norm(&w.features, p.get(self.cln_gain), p.get(self.cln_bias))?;
        let mut z = channel_linear(&cln_out, p.get(self.bottleneck_w), p.get(self.bottleneck_b))?;
        let mut skip_sum: Option<Tensor> = None;
        let mut caches = Vec::with_capacity(self.schedule.len());
        for slot in &self.schedule {
            let (out, cache) = conv_block(&z, p, &self.blocks[slot.stored], slot.dilation)?;
            if let Some(s) = out.skip {
                match skip_sum.as_mut() {
                    Some(acc) => acc.axpy(1.0, &s)?,
                    None => skip_sum = Some(s),
                }
            }
            z = out.residual;
            caches.push(cache);
        }
        let mask_in = skip_sum.unwrap_or(z);
        let mask_pre = channel_linear(&mask_in, p.get(self.mask_w), p.get(self.mask_b))?;
        let mask_all = relu(&mask_pre);
        let lx = w.num_frames();
        let masks = (0..cfg.speakers)
            .map(|c| {
                let data = mask_all.data()[c * cfg.n * lx..(c + 1) * cfg.n * lx].to_vec();
                Ok(EncodedSeq {
                    features: Tensor::from_vec(&[cfg.n, lx], data)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((cln, cln_out, caches, mask_in, mask_pre, masks))
    }

    /// One nonnegative `[N, L_x]` mask per speaker.
    pub fn estimate_masks(&self, w: &EncodedSeq) -> Result<Vec<EncodedSeq>> {
        Ok(self.mask_network(w)?.5)
    }

    pub fn forward(&self, x: &Waveform) -> Result<ForwardPass> {
        let cfg = &self.config;
        if x.len() < cfg.block_len {
            return Err(Error::InvalidArgument(format!(
                "input has {} samples, separator needs at least {}",
                x.len(),
                cfg.block_len
            )));
        }
        if x.sample_rate != cfg.sample_rate {
            return Err(Error::SampleRate {
                expected: cfg.sample_rate,
                got: x.sample_rate,
            });
        }
        let frames = segment(x, cfg.block_len)?;
        let encoded = encode(&frames, self.params.get(self.encoder))?;
        let (cln, cln_out, blocks, mask_in, mask_pre, masks) = self.mask_network(&encoded)?;
        let mut masked = Vec::with_capacity(masks.len());
        let mut estimates = Vec::with_capacity(masks.len());
        for m in &masks {
            let v = apply_mask(&encoded, m)?;
            let est_frames = decode(&v, self.params.get(self.decoder))?;
            estimates.push(overlap_add(&est_frames, x.len(), x.sample_rate)?);
            masked.push(v);
        }
        Ok(ForwardPass {
            estimates,
            cache: ForwardCache {
                input_len: x.len(),
                frames,
                encoded,
                cln,
                cln_out,
                blocks,
                mask_in,
                mask_pre,
                masks,
                masked,
            },
        })
    }

    /// Separates a mixture into one waveform per speaker, each as long as the input.
    pub fn separate(&self, x: &Waveform) -> Result<Vec<Waveform>> {
        Ok(self.forward(x)?.estimates)
    }

    /// Backpropagates per-speaker waveform gradients, adding every parameter
    /// gradient into `grads`.
    pub fn backward(&self, cache: &ForwardCache, g_estimates: &[Vec<f64>], grads: &mut Grads) -> Result<()> {
        let cfg = &self.config;
        let p = &self.params;
        if g_estimates.len() != cfg.speakers || g_estimates.iter().any(|g| g.len() != cache.input_len) {
            return Err(Error::dim(
                "SeparatorModel::backward",
                format!("{} gradients of length {}", cfg.speakers, cache.input_len),
                format!("{} gradients", g_estimates.len()),
            ));
        }
        let lx = cache.encoded.num_frames();
        let mut g_encoded = Tensor::zeros(&[cfg.n, lx]);
        let mut g_mask_all = Tensor::zeros(&[cfg.speakers * cfg.n, lx]);
        for (c, g) in g_estimates.iter().enumerate() {
            let g_frames = overlap_add_backward(g, lx, cfg.block_len);
            let g_v = decode_backward(
                &cache.masked[c],
                p.get(self.decoder),
                &g_frames,
                grads.get_mut(self.decoder),
            )?;
            let (g_w, g_m) = apply_mask_backward(&cache.encoded, &cache.masks[c], &g_v)?;
            g_encoded.axpy(1.0, &g_w)?;
            g_mask_all.data_mut()[c * cfg.n * lx..(c + 1) * cfg.n * lx].copy_from_slice(g_m.data());
        }
        let g_mask_pre = relu_backward(&cache.mask_pre, &g_mask_all)?;
        let (gw, gb) = two_mut(grads, self.mask_w.index(), self.mask_b.index());
        let g_mask_in = channel_linear_backward(&cache.mask_in, p.get(self.mask_w), &g_mask_pre, gw, gb)?;

        // With skip connections the mask head reads the skip sum, so the
        // residual stream leaving the last block carries no gradient.
        let (mut g_z, g_skip) = if cfg.skip_connections {
            (Tensor::zeros(g_mask_in.shape()), Some(g_mask_in))
        } else {
            (g_mask_in, None)
        };
        for (slot, bc) in self.schedule.iter().zip(&cache.blocks).rev() {
            g_z = conv_block_backward(p, &self.blocks[slot.stored], bc, &g_z, g_skip.as_ref(), grads)?;
        }

        let (gw, gb) = two_mut(grads, self.bottleneck_w.index(), self.bottleneck_b.index());
        let g_cln_out = channel_linear_backward(&cache.cln_out, p.get(self.bottleneck_w), &g_z, gw, gb)?;
        let (gg, gbias) = two_mut(grads, self.cln_gain.index(), self.cln_bias.index());
        let g_w = cumulative_layer_norm_backward(&cache.cln, p.get(self.cln_gain), &g_cln_out, gg, gbias)?;
        g_encoded.axpy(1.0, &g_w)?;
        encode_backward(
            &cache.frames,
            p.get(self.encoder),
            &cache.encoded,
            &g_encoded,
            grads.get_mut(self.encoder),
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dtcn::config::DtcnConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mixture(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new(Tensor::randn(&[len], &mut rng).into_vec(), 8000)
    }

    #[test]
    fn zero_block_is_identity() {
        let mut m = SeparatorModel::build(&DtcnConfig::toy(), 3).unwrap();
        let ids: Vec<_> = m.block_ids().collect();
        for id in ids {
            m.params.get_mut(id).fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Tensor::randn(&[32, 20], &mut rng);
        for slot in &m.schedule {
            let (out, _) = conv_block(&z, &m.params, &m.blocks[slot.stored], slot.dilation).unwrap();
            assert_eq!(out.residual, z);
        }
    }

    #[test]
    fn zero_offsets_match_plain_model() {
        let cfg = DtcnConfig::toy();
        let d = SeparatorModel::build(&cfg, 11).unwrap();
        let mut plain = SeparatorModel::build(&cfg.with_deformable(false), 0).unwrap();
        assert_eq!(plain.copy_matching_params(&d), plain.params.len());
        let x = mixture(400, 2);
        let a = d.separate(&x).unwrap();
        let b = plain.separate(&x).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert_eq!(u.len(), x.len());
            let diff = u
                .samples
                .iter()
                .zip(&v.samples)
                .map(|(p, q)| (p - q).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-10, "{diff}");
        }
    }

    #[test]
    fn shared_equals_copied_stack() {
        let cfg = DtcnConfig::toy().with_shared_weights(true);
        let shared = SeparatorModel::build(&cfg, 4).unwrap();
        let mut full = SeparatorModel::build(&cfg.with_shared_weights(false), 0).unwrap();
        for id in full.params.ids().collect::<Vec<_>>() {
            let name = full.params.name(id).to_string();
            let src_name = match name.strip_prefix("blocks.") {
                Some(rest) => {
                    let (j, tail) = rest.split_once('.').unwrap();
                    format!("blocks.{}.{tail}", j.parse::<usize>().unwrap() % cfg.x)
                }
                None => name,
            };
            let src = shared.params.get(shared.params.id(&src_name).unwrap()).clone();
            full.params.set(id, src).unwrap();
        }
        let x = mixture(300, 5);
        assert_eq!(shared.separate(&x).unwrap(), full.separate(&x).unwrap());
    }

    #[test]
    fn masks_and_lengths() {
        let m = SeparatorModel::build(&DtcnConfig::toy(), 0).unwrap();
        let x = mixture(333, 1);
        let pass = m.forward(&x).unwrap();
        assert_eq!(pass.estimates.len(), 2);
        assert!(pass.estimates.iter().all(|e| e.len() == 333));
        for mask in pass.cache.masks() {
            assert_eq!(mask.features.shape(), pass.cache.encoded().features.shape());
            assert!(mask.features.data().iter().all(|&v| v >= 0.0));
        }
        assert_eq!(m.separate(&x).unwrap(), m.separate(&x).unwrap());
        assert!(m.separate(&mixture(10, 1)).is_err());
        assert!(matches!(
            m.separate(&Waveform::new(vec![0.0; 100], 16000)),
            Err(Error::SampleRate { .. })
        ));
    }

    #[test]
    fn offset_prelu_admits_negative_values() {
        let m = SeparatorModel::build(&DtcnConfig::toy(), 0).unwrap();
        let op = m.blocks[0].offsets.unwrap();
        let mut params = m.params.clone();
        params.get_mut(op.depthwise).fill(0.0);
        params.get_mut(op.pointwise_b).fill(-1.0);
        let h = Tensor::zeros(&[64, 7]);
        let tau = offset_subnet(&h, &params, &op, 1).unwrap();
        assert_eq!(tau.tau.shape(), &[7, 3]);
        assert!(tau.tau.data().iter().all(|&v| v == -0.25));
    }
}
