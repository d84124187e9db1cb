//! Central finite-difference checks of every differentiable op and of the
//! whole separator, in double precision with step 1e-6.

use dtcn::deformconv::{dconv, dconv_backward, ddconv, ddconv_backward, DepthwiseKernel, OffsetField, Padding};
use dtcn::dtcn::{conv_block, conv_block_backward, DtcnConfig, SeparatorModel};
use dtcn::frames::{
    apply_mask, apply_mask_backward, decode, decode_backward, encode, encode_backward, overlap_add,
    overlap_add_backward, segment, segment_backward, EncodedSeq, FrameMatrix, Waveform,
};
use dtcn::numcore::gradcheck::{check_scalar, check_scalar_kink_aware, relative_error};
use dtcn::numcore::{
    channel_linear, channel_linear_backward, cumulative_layer_norm, cumulative_layer_norm_backward, global_layer_norm,
    global_layer_norm_backward, grad_check, prelu, prelu_backward, relu, relu_backward, FnOp, Tensor,
};
use dtcn::objective::{pit_loss, pit_loss_with_grad, sisdr_with_grad};
use dtcn::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const OP_TOL: f64 = 1e-4;
const E2E_TOL: f64 = 1e-3;
const SEEDS: u64 = 10;
// One-sided differences carry O(h) error, so a kink-side match is looser.
const KINK_MATCH: f64 = 1e-3;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Moves entries within `margin` of zero away from the kink.
fn off_zero(mut t: Tensor, margin: f64) -> Tensor {
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = if *v < 0.0 { -margin } else { margin } * 2.0;
        }
    }
    t
}

fn check(name: &str, op: &dyn dtcn::numcore::Differentiable, inputs: &[Tensor]) {
    let r = grad_check(op, inputs, H, 7).unwrap();
    assert!(r.max_rel_error < OP_TOL, "{name}: {r:?}");
}

pub fn channel_linear_gradients() {
    for s in 0..SEEDS {
        let op = FnOp {
            forward: |xs: &[Tensor]| channel_linear(&xs[0], &xs[1], &xs[2]),
            backward: |xs: &[Tensor], up: &Tensor| {
                let mut gw = Tensor::zeros(xs[1].shape());
                let mut gb = Tensor::zeros(xs[2].shape());
                let gx = channel_linear_backward(&xs[0], &xs[1], up, &mut gw, &mut gb)?;
                Ok(vec![gx, gw, gb])
            },
        };
        check(
            "channel_linear",
            &op,
            &[
                randn(&[3, 7], 1 + 1000 * s),
                randn(&[3, 5], 2 + 1000 * s),
                randn(&[5], 3 + 1000 * s),
            ],
        );
    }
}

pub fn relu_and_prelu_gradients() {
    for s in 0..SEEDS {
        let relu_op = FnOp {
            forward: |xs: &[Tensor]| Ok(relu(&xs[0])),
            backward: |xs: &[Tensor], up: &Tensor| Ok(vec![relu_backward(&xs[0], up)?]),
        };
        check("relu", &relu_op, &[off_zero(randn(&[4, 6], 4 + 1000 * s), 1e-3)]);
        let prelu_op = FnOp {
            forward: |xs: &[Tensor]| prelu(&xs[0], &xs[1]),
            backward: |xs: &[Tensor], up: &Tensor| {
                let mut ga = Tensor::zeros(xs[1].shape());
                let gx = prelu_backward(&xs[0], &xs[1], up, &mut ga)?;
                Ok(vec![gx, ga])
            },
        };
        let x = off_zero(randn(&[4, 6], 5 + 1000 * s), 1e-3);
        check("prelu shared slope", &prelu_op, &[x.clone(), Tensor::full(&[1], 0.25)]);
        check("prelu per channel", &prelu_op, &[x, randn(&[4], 6 + 1000 * s)]);
    }
}

pub fn layer_norm_gradients() {
    for s in 0..SEEDS {
        let gln = FnOp {
            forward: |xs: &[Tensor]| Ok(global_layer_norm(&xs[0], &xs[1], &xs[2])?.0),
            backward: |xs: &[Tensor], up: &Tensor| {
                let (_, cache) = global_layer_norm(&xs[0], &xs[1], &xs[2])?;
                let mut gg = Tensor::zeros(xs[1].shape());
                let mut gb = Tensor::zeros(xs[2].shape());
                let gx = global_layer_norm_backward(&cache, &xs[1], up, &mut gg, &mut gb)?;
                Ok(vec![gx, gg, gb])
            },
        };
        check(
            "gLN",
            &gln,
            &[
                randn(&[4, 9], 7 + 1000 * s),
                randn(&[4], 8 + 1000 * s),
                randn(&[4], 9 + 1000 * s),
            ],
        );
        let cln = FnOp {
            forward: |xs: &[Tensor]| Ok(cumulative_layer_norm(&xs[0], &xs[1], &xs[2])?.0),
            backward: |xs: &[Tensor], up: &Tensor| {
                let (_, cache) = cumulative_layer_norm(&xs[0], &xs[1], &xs[2])?;
                let mut gg = Tensor::zeros(xs[1].shape());
                let mut gb = Tensor::zeros(xs[2].shape());
                let gx = cumulative_layer_norm_backward(&cache, &xs[1], up, &mut gg, &mut gb)?;
                Ok(vec![gx, gg, gb])
            },
        };
        check(
            "cLN",
            &cln,
            &[
                randn(&[4, 9], 10 + 1000 * s),
                randn(&[4], 11 + 1000 * s),
                randn(&[4], 12 + 1000 * s),
            ],
        );
    }
}

pub fn depthwise_conv_gradients() {
    for s in 0..SEEDS {
        for padding in [Padding::Same, Padding::Valid] {
            for (p, f) in [(1, 1), (2, 3), (3, 2), (5, 1)] {
                let op = FnOp {
                    forward: move |xs: &[Tensor]| dconv(&xs[0], &DepthwiseKernel::new(xs[1].clone(), f)?, padding),
                    backward: move |xs: &[Tensor], up: &Tensor| {
                        let k = DepthwiseKernel::new(xs[1].clone(), f)?;
                        let mut gk = Tensor::zeros(xs[1].shape());
                        let gy = dconv_backward(&xs[0], &k, padding, up, &mut gk)?;
                        Ok(vec![gy, gk])
                    },
                };
                check(
                    &format!("dconv P={p} f={f} {padding:?}"),
                    &op,
                    &[randn(&[3, 14], 13 + 1000 * s), randn(&[3, p], 14 + 1000 * s)],
                );
            }
        }
    }
}

/// Offsets whose sampling positions stay at least 0.2 away from every integer.
fn fractional_offsets(frames: usize, taps: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..frames * taps)
        .map(|_| rng.gen_range(-3i32..=3) as f64 + rng.gen_range(0.2..0.8))
        .collect();
    Tensor::from_vec(&[frames, taps], data).unwrap()
}

pub fn deformable_conv_gradients() {
    for s in 0..SEEDS {
        for padding in [Padding::Same, Padding::Valid] {
            for (p, f) in [(1, 1), (2, 2), (3, 1), (3, 4), (5, 2)] {
                let len = 16;
                let out_len = match padding {
                    Padding::Same => len,
                    Padding::Valid => len - (p - 1) * f,
                };
                let op = FnOp {
                    forward: move |xs: &[Tensor]| {
                        let k = DepthwiseKernel::new(xs[1].clone(), f)?;
                        ddconv(&xs[0], &k, &OffsetField { tau: xs[2].clone() }, padding)
                    },
                    backward: move |xs: &[Tensor], up: &Tensor| {
                        let k = DepthwiseKernel::new(xs[1].clone(), f)?;
                        let g = ddconv_backward(&xs[0], &k, &OffsetField { tau: xs[2].clone() }, padding, up)?;
                        Ok(vec![g.y, g.kernel, g.tau])
                    },
                };
                let inputs = [
                    randn(&[3, len], 15 + 1000 * s),
                    randn(&[3, p], 16 + 1000 * s),
                    fractional_offsets(out_len, p, 17 + 1000 * s),
                ];
                check(&format!("ddconv P={p} f={f} {padding:?}"), &op, &inputs);
            }
        }
    }
}

pub fn framing_gradients() {
    for s in 0..SEEDS {
        let seg = FnOp {
            forward: |xs: &[Tensor]| Ok(segment(&Waveform::new(xs[0].data().to_vec(), 8000), 6)?.frames),
            backward: |xs: &[Tensor], up: &Tensor| {
                let g = segment_backward(
                    &FrameMatrix {
                        frames: up.clone(),
                        hop: 3,
                    },
                    xs[0].len(),
                );
                Ok(vec![Tensor::from_vec(&[g.len()], g)?])
            },
        };
        check("segment", &seg, &[randn(&[20], 18 + 1000 * s)]);
        let ola = FnOp {
            forward: |xs: &[Tensor]| {
                let w = overlap_add(
                    &FrameMatrix {
                        frames: xs[0].clone(),
                        hop: 3,
                    },
                    19,
                    8000,
                )?;
                Tensor::from_vec(&[19], w.samples)
            },
            backward: |xs: &[Tensor], up: &Tensor| {
                Ok(vec![overlap_add_backward(up.data(), xs[0].shape()[0], 6).frames])
            },
        };
        check("overlap_add", &ola, &[randn(&[6, 6], 19 + 1000 * s)]);
    }
}

pub fn encoder_decoder_and_mask_gradients() {
    for s in 0..SEEDS {
        let frames = randn(&[5, 4], 20 + 1000 * s);
        let mut basis = randn(&[4, 6], 21 + 1000 * s);
        // Keep every pre-activation clear of the ReLU kink.
        for t in 0..100u64 {
            let pre = encode(
                &FrameMatrix {
                    frames: frames.clone(),
                    hop: 2,
                },
                &basis,
            )
            .unwrap();
            let neg = encode(
                &FrameMatrix {
                    frames: frames.clone(),
                    hop: 2,
                },
                &basis.scale(-1.0),
            )
            .unwrap();
            let near = pre
                .features
                .data()
                .iter()
                .zip(neg.features.data())
                .any(|(a, b)| (a - b).abs() < 1e-3);
            if !near {
                break;
            }
            basis = randn(&[4, 6], 500 + t + 1000 * s);
        }
        let enc = FnOp {
            forward: |xs: &[Tensor]| {
                Ok(encode(
                    &FrameMatrix {
                        frames: xs[0].clone(),
                        hop: 2,
                    },
                    &xs[1],
                )?
                .features)
            },
            backward: |xs: &[Tensor], up: &Tensor| {
                let fm = FrameMatrix {
                    frames: xs[0].clone(),
                    hop: 2,
                };
                let e = encode(&fm, &xs[1])?;
                let mut gb = Tensor::zeros(xs[1].shape());
                let gf = encode_backward(&fm, &xs[1], &e, up, &mut gb)?;
                Ok(vec![gf.frames, gb])
            },
        };
        check("encode", &enc, &[frames, basis]);

        let dec = FnOp {
            forward: |xs: &[Tensor]| {
                Ok(decode(
                    &EncodedSeq {
                        features: xs[0].clone(),
                    },
                    &xs[1],
                )?
                .frames)
            },
            backward: |xs: &[Tensor], up: &Tensor| {
                let v = EncodedSeq {
                    features: xs[0].clone(),
                };
                let mut gs = Tensor::zeros(xs[1].shape());
                let gv = decode_backward(
                    &v,
                    &xs[1],
                    &FrameMatrix {
                        frames: up.clone(),
                        hop: 2,
                    },
                    &mut gs,
                )?;
                Ok(vec![gv, gs])
            },
        };
        check(
            "decode",
            &dec,
            &[randn(&[6, 5], 22 + 1000 * s), randn(&[6, 4], 23 + 1000 * s)],
        );

        let mask = FnOp {
            forward: |xs: &[Tensor]| {
                Ok(apply_mask(
                    &EncodedSeq {
                        features: xs[0].clone(),
                    },
                    &EncodedSeq {
                        features: xs[1].clone(),
                    },
                )?
                .features)
            },
            backward: |xs: &[Tensor], up: &Tensor| {
                let (gw, gm) = apply_mask_backward(
                    &EncodedSeq {
                        features: xs[0].clone(),
                    },
                    &EncodedSeq {
                        features: xs[1].clone(),
                    },
                    up,
                )?;
                Ok(vec![gw, gm])
            },
        };
        check(
            "apply_mask",
            &mask,
            &[randn(&[6, 5], 24 + 1000 * s), randn(&[6, 5], 25 + 1000 * s)],
        );
    }
}

pub fn sisdr_and_pit_gradients() {
    for s in 0..SEEDS {
        let reference = randn(&[40], 26 + 1000 * s);
        let est = reference.add(&randn(&[40], 27 + 1000 * s).scale(0.3)).unwrap();
        let (_, g) = sisdr_with_grad(est.data(), reference.data()).unwrap();
        let f =
            |xs: &[Tensor]| -> Result<f64> { Ok(dtcn::objective::sisdr_slices(xs[0].data(), reference.data())?.value) };
        let r = check_scalar(&f, &[est], &[Tensor::from_vec(&[40], g).unwrap()], H).unwrap();
        assert!(r.max_rel_error < OP_TOL, "sisdr: {r:?}");

        for c in [2usize, 3] {
            let refs: Vec<Waveform> = (0..c)
                .map(|i| Waveform::new(randn(&[30], 30 + i as u64 + 1000 * s).into_vec(), 8000))
                .collect();
            let ests = randn(&[c, 30], 40 + c as u64 + 1000 * s);
            let as_waves =
                |t: &Tensor| -> Vec<Waveform> { (0..c).map(|i| Waveform::new(t.row(i).to_vec(), 8000)).collect() };
            let (_, grads) = pit_loss_with_grad(&as_waves(&ests), &refs).unwrap();
            let flat: Vec<f64> = grads.concat();
            let f = |xs: &[Tensor]| -> Result<f64> { Ok(pit_loss(&as_waves(&xs[0]), &refs)?.loss) };
            let r = check_scalar(
                &f,
                std::slice::from_ref(&ests),
                &[Tensor::from_vec(&[c, 30], flat).unwrap()],
                H,
            )
            .unwrap();
            assert!(r.max_rel_error < OP_TOL, "pit C={c}: {r:?}");
        }
    }
}

fn tiny_cfg() -> DtcnConfig {
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

/// Gives the offset heads and the mask head random weights; both start at
/// zero, which would make offsets integral and hide upstream gradients.
fn randomize_heads(model: &mut SeparatorModel, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, cn) = model.params.get(model.mask_w).dims2().unwrap();
    let w = Tensor::uniform(&[b, cn], 0.5, &mut rng);
    model.params.set(model.mask_w, w).unwrap();
    for blk in model.blocks.clone() {
        if let Some(o) = blk.offsets {
            let shape = model.params.get(o.pointwise_w).shape().to_vec();
            model
                .params
                .set(o.pointwise_w, Tensor::uniform(&shape, 0.3, &mut rng))
                .unwrap();
            let p = model.params.get(o.pointwise_b).len();
            model
                .params
                .set(o.pointwise_b, Tensor::uniform(&[p], 0.7, &mut rng))
                .unwrap();
        }
    }
}

pub fn conv_block_gradients() {
    for s in 0..SEEDS {
        for (deformable, skip) in [(true, true), (false, false), (true, false)] {
            let cfg = tiny_cfg().with_deformable(deformable).with_skip_connections(skip);
            let mut model = SeparatorModel::build(&cfg, 4 + s).unwrap();
            randomize_heads(&mut model, 5 + s);
            let bp = model.blocks[0];
            let ids: Vec<_> = model
                .block_ids()
                .filter(|id| {
                    let name = model.params.name(*id);
                    name.starts_with("blocks.0.")
                })
                .collect();
            let z = randn(&[4, 12], 50 + 1000 * s);
            let up_r = randn(&[4, 12], 51 + 1000 * s);
            let up_s = randn(&[4, 12], 52 + 1000 * s);
            let dilation = 2;

            let (out, cache) = conv_block(&z, &model.params, &bp, dilation).unwrap();
            let mut grads = model.params.zero_grads();
            let gz = conv_block_backward(
                &model.params,
                &bp,
                &cache,
                &up_r,
                out.skip.as_ref().map(|_| &up_s),
                &mut grads,
            )
            .unwrap();

            let mut inputs = vec![z];
            let mut analytic = vec![gz];
            for &id in &ids {
                inputs.push(model.params.get(id).clone());
                analytic.push(grads.get(id).clone());
            }
            let base = model.params.clone();
            let f = |xs: &[Tensor]| -> Result<f64> {
                let mut store = base.clone();
                for (&id, t) in ids.iter().zip(&xs[1..]) {
                    store.set(id, t.clone())?;
                }
                let (o, _) = conv_block(&xs[0], &store, &bp, dilation)?;
                let mut s = o.residual.dot(&up_r)?;
                if let Some(sk) = o.skip {
                    s += sk.dot(&up_s)?;
                }
                Ok(s)
            };
            let r = check_scalar_kink_aware(&f, &inputs, &analytic, H, OP_TOL, KINK_MATCH).unwrap();
            // A single unit sitting near a kink can be pushed across by several inputs.
            assert!(r.kinks_excluded <= r.entries_checked / 20, "too many kinks: {r:?}");
            assert!(
                r.max_rel_error < OP_TOL,
                "conv_block deformable={deformable} skip={skip}: {r:?}"
            );
        }
    }
}

fn signal(len: usize, seed: u64) -> Waveform {
    Waveform::new(randn(&[len], seed).into_vec(), 8000)
}

fn end_to_end(cfg: DtcnConfig) -> f64 {
    let mut model = SeparatorModel::build(&cfg, 3).unwrap();
    randomize_heads(&mut model, 99);
    let x = signal(32, 1);
    let refs: Vec<Waveform> = (0..cfg.speakers).map(|c| signal(32, 2 + c as u64)).collect();
    let pass = model.forward(&x).unwrap();
    let (_, g_est) = pit_loss_with_grad(&pass.estimates, &refs).unwrap();
    let mut grads = model.params.zero_grads();
    model.backward(&pass.cache, &g_est, &mut grads).unwrap();

    let loss = |m: &SeparatorModel| pit_loss(&m.separate(&x).unwrap(), &refs).unwrap().loss;
    let mut worst = 0.0f64;
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        for k in 0..model.params.get(id).len() {
            let orig = model.params.get(id).data()[k];
            model.params.get_mut(id).data_mut()[k] = orig + H;
            let up = loss(&model);
            model.params.get_mut(id).data_mut()[k] = orig - H;
            let down = loss(&model);
            model.params.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * H);
            let e = relative_error(grads.get(id).data()[k], numeric);
            if e > E2E_TOL {
                eprintln!(
                    "{} [{k}]: analytic {} numeric {numeric}",
                    model.params.name(id),
                    grads.get(id).data()[k]
                );
            }
            worst = worst.max(e);
        }
    }
    worst
}

pub fn end_to_end_toy_separator() {
    let worst = end_to_end(tiny_cfg());
    assert!(worst < E2E_TOL, "worst relative error {worst}");
}

pub fn end_to_end_variants() {
    for (name, cfg) in [
        ("non-deformable", tiny_cfg().with_deformable(false)),
        ("skip connections", tiny_cfg().with_skip_connections(true)),
        (
            "shared weights",
            DtcnConfig { r: 2, ..tiny_cfg() }.with_shared_weights(true),
        ),
        (
            "three speakers",
            DtcnConfig {
                speakers: 3,
                ..tiny_cfg()
            },
        ),
    ] {
        let worst = end_to_end(cfg);
        assert!(worst < E2E_TOL, "{name}: worst relative error {worst}");
    }
}

/// Every check in the suite, by name.
pub const SUITE: &[(&str, fn())] = &[
    ("channel_linear_gradients", channel_linear_gradients),
    ("relu_and_prelu_gradients", relu_and_prelu_gradients),
    ("layer_norm_gradients", layer_norm_gradients),
    ("depthwise_conv_gradients", depthwise_conv_gradients),
    ("deformable_conv_gradients", deformable_conv_gradients),
    ("framing_gradients", framing_gradients),
    ("encoder_decoder_and_mask_gradients", encoder_decoder_and_mask_gradients),
    ("sisdr_and_pit_gradients", sisdr_and_pit_gradients),
    ("conv_block_gradients", conv_block_gradients),
    ("end_to_end_toy_separator", end_to_end_toy_separator),
    ("end_to_end_variants", end_to_end_variants),
];
