//! Dilated depthwise convolution and its deformable counterpart.
//!
//! Both operate on `[G, L]` inputs with one kernel row per channel. The
//! deformable variant shifts tap `p` of output frame `l` by a learned,
//! real-valued offset `tau[l, p]` that is shared by every channel, and reads
//! the input at the shifted position by two-point linear interpolation.
//!
//! All positions are in *padded* coordinates: output frame `l` anchors its
//! first tap at padded index `l`, tap `p` nominally sits at `l + f*p`, and the
//! padded sequence is the input with `pad_left` zeros in front (and zeros
//! everywhere outside). The interpolation's lower sample index is clamped to
//! `l + P*f - 1`, so no tap of frame `l` can read beyond padded index
//! `l + P*f`. There is no lower clamp; reads before the start see zeros.

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Per-channel taps `[G, P]` plus the dilation factor.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthwiseKernel {
    pub weights: Tensor,
    pub dilation: usize,
}

impl DepthwiseKernel {
    pub fn new(weights: Tensor, dilation: usize) -> Result<Self> {
        let (g, p) = weights.dims2()?;
        if g == 0 || p == 0 || dilation == 0 {
            return Err(Error::InvalidArgument(format!(
                "depthwise kernel needs G, P, f >= 1 (got G={g}, P={p}, f={dilation})"
            )));
        }
        Ok(Self { weights, dilation })
    }

    pub fn channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn taps(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Span of the undeformed kernel, `(P - 1) * f + 1`.
    pub fn span(&self) -> usize {
        (self.taps() - 1) * self.dilation + 1
    }
}

/// Learned offsets `[L_out, P]`, shared across channels.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetField {
    pub tau: Tensor,
}

impl OffsetField {
    pub fn zeros(frames: usize, taps: usize) -> Self {
        Self {
            tau: Tensor::zeros(&[frames, taps]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `(P-1)*f` split as evenly as possible, left side
    /// rounded down; output length equals input length.
    Same,
    /// No padding; output frame 0 is anchored at input sample 0.
    Valid,
}

impl Padding {
    /// `(pad_left, output_len)` for an input of `len` samples.
    pub fn resolve(self, len: usize, kernel: &DepthwiseKernel) -> Result<(usize, usize)> {
        let extent = kernel.span() - 1;
        match self {
            Padding::Same => Ok((extent / 2, len)),
            Padding::Valid => {
                if len < extent + 1 {
                    return Err(Error::InvalidArgument(format!(
                        "valid convolution needs at least {} samples, got {len}",
                        extent + 1
                    )));
                }
                Ok((0, len - extent))
            }
        }
    }
}

fn check_input(op: &'static str, y: &Tensor, k: &DepthwiseKernel) -> Result<(usize, usize)> {
    let (g, l) = y.dims2()?;
    if g != k.channels() {
        return Err(Error::dim(op, format!("{} channels", k.channels()), g));
    }
    Ok((g, l))
}

/// Dilated depthwise convolution, `out[g, l] = sum_p k[g, p] * y[g, l + f*p - pad_left]`.
pub fn dconv(y: &Tensor, k: &DepthwiseKernel, padding: Padding) -> Result<Tensor> {
    let (g_n, len) = check_input("dconv", y, k)?;
    let (pad, out_len) = padding.resolve(len, k)?;
    let (p_n, f) = (k.taps(), k.dilation);
    let mut out = Tensor::zeros(&[g_n, out_len]);
    for g in 0..g_n {
        let yrow = y.row(g);
        let krow = k.weights.row(g);
        let orow = out.row_mut(g);
        for (p, &kv) in krow.iter().enumerate().take(p_n) {
            // source index = l + shift
            let shift = (f * p) as isize - pad as isize;
            let lo = (-shift).max(0) as usize;
            let hi = ((len as isize - shift).max(0) as usize).min(out_len);
            for l in lo..hi {
                orow[l] += kv * yrow[(l as isize + shift) as usize];
            }
        }
    }
    Ok(out)
}

/// Returns `d/dy`; adds `d/dk` into `gk`.
pub fn dconv_backward(
    y: &Tensor,
    k: &DepthwiseKernel,
    padding: Padding,
    gout: &Tensor,
    gk: &mut Tensor,
) -> Result<Tensor> {
    let (g_n, len) = check_input("dconv_backward", y, k)?;
    let (pad, out_len) = padding.resolve(len, k)?;
    if gout.shape() != [g_n, out_len] {
        return Err(Error::dim(
            "dconv_backward",
            format!("[{g_n}, {out_len}]"),
            format!("{:?}", gout.shape()),
        ));
    }
    let (p_n, f) = (k.taps(), k.dilation);
    let mut gy = Tensor::zeros(&[g_n, len]);
    for g in 0..g_n {
        let yrow = y.row(g);
        let grow = gout.row(g);
        let gyrow = gy.row_mut(g);
        for p in 0..p_n {
            let kv = k.weights.at(g, p);
            let shift = (f * p) as isize - pad as isize;
            let lo = (-shift).max(0) as usize;
            let hi = ((len as isize - shift).max(0) as usize).min(out_len);
            let mut acc = 0.0;
            for l in lo..hi {
                let src = (l as isize + shift) as usize;
                gyrow[src] += kv * grow[l];
                acc += grow[l] * yrow[src];
            }
            gk.data_mut()[g * p_n + p] += acc;
        }
    }
    Ok(gy)
}

/// Two-point linear interpolation of channel `g` at a real position, reading
/// zeros outside `[0, L)`.
pub fn linear_interp(y: &Tensor, pos: f64, g: usize) -> Result<f64> {
    if !pos.is_finite() {
        return Err(Error::NonFinite("linear_interp"));
    }
    let (g_n, len) = y.dims2()?;
    if g >= g_n {
        return Err(Error::dim("linear_interp", format!("channel < {g_n}"), g));
    }
    let row = y.row(g);
    let lower = pos.floor();
    let mut acc = 0.0;
    for u in [lower, lower + 1.0] {
        let w = (1.0 - (u - pos).abs()).max(0.0);
        if u >= 0.0 && (u as usize) < len {
            acc += w * row[u as usize];
        }
    }
    Ok(acc)
}

/// Interpolation stencil for one deformed tap, with input indices already
/// mapped to the unpadded sequence (out-of-range reads get weight 0).
#[derive(Debug, Clone, Copy, Default)]
struct Stencil {
    idx: [usize; 2],
    w: [f64; 2],
    /// d(sample)/d(position) coefficients, left-limit at integer positions.
    slope_idx: [usize; 2],
    slope: [f64; 2],
}

fn stencil(pos: f64, clamp: i64, pad: usize, len: usize) -> Stencil {
    let to_input = |u: i64| -> Option<usize> {
        let i = u - pad as i64;
        (i >= 0 && (i as usize) < len).then_some(i as usize)
    };
    let mut s = Stencil::default();

    let floor = pos.floor() as i64;
    let lower = floor.min(clamp);
    for (j, u) in [lower, lower + 1].into_iter().enumerate() {
        let w = (1.0 - (u as f64 - pos).abs()).max(0.0);
        if let Some(i) = to_input(u) {
            s.idx[j] = i;
            s.w[j] = w;
        }
    }

    // The sampled value is piecewise linear in `pos` with breakpoints at the
    // integers. Use the piece to the left of `pos` when it sits on one.
    let piece = if pos == pos.floor() { floor - 1 } else { floor };
    let lower = piece.min(clamp);
    for (j, u) in [lower, lower + 1].into_iter().enumerate() {
        let d = if u == piece {
            -1.0
        } else if u == piece + 1 {
            1.0
        } else {
            0.0
        };
        if let Some(i) = to_input(u) {
            s.slope_idx[j] = i;
            s.slope[j] = d;
        }
    }
    s
}

fn check_offsets(op: &'static str, tau: &OffsetField, out_len: usize, taps: usize) -> Result<()> {
    if tau.tau.shape() != [out_len, taps] {
        return Err(Error::dim(
            op,
            format!("offsets [{out_len}, {taps}]"),
            format!("{:?}", tau.tau.shape()),
        ));
    }
    Ok(())
}

fn stencils_for_tap(
    tau: &OffsetField,
    p: usize,
    k: &DepthwiseKernel,
    pad: usize,
    len: usize,
    out_len: usize,
) -> Vec<Stencil> {
    let (p_n, f) = (k.taps(), k.dilation);
    (0..out_len)
        .map(|l| {
            let pos = (l + f * p) as f64 + tau.tau.at(l, p);
            let clamp = (l + p_n * f) as i64 - 1;
            stencil(pos, clamp, pad, len)
        })
        .collect()
}

/// Deformable depthwise convolution:
/// `out[g, l] = sum_p k[g, p] * interp(y_g, l + f*p + tau[l, p])` with the
/// receptive-field clamp described in the module docs.
pub fn ddconv(y: &Tensor, k: &DepthwiseKernel, tau: &OffsetField, padding: Padding) -> Result<Tensor> {
    let (g_n, len) = check_input("ddconv", y, k)?;
    let (pad, out_len) = padding.resolve(len, k)?;
    check_offsets("ddconv", tau, out_len, k.taps())?;
    if !tau.tau.all_finite() {
        return Err(Error::NonFinite("ddconv offsets"));
    }
    let mut out = Tensor::zeros(&[g_n, out_len]);
    for p in 0..k.taps() {
        let st = stencils_for_tap(tau, p, k, pad, len, out_len);
        for g in 0..g_n {
            let kv = k.weights.at(g, p);
            let yrow = y.row(g);
            let orow = out.row_mut(g);
            for (o, s) in orow.iter_mut().zip(&st) {
                *o += kv * (s.w[0] * yrow[s.idx[0]] + s.w[1] * yrow[s.idx[1]]);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct DdconvGrads {
    pub y: Tensor,
    pub kernel: Tensor,
    pub tau: Tensor,
}

/// Exact vector-Jacobian products of [`ddconv`] for the input, the kernel and
/// the offsets. At integer sampling positions the offset derivative takes the
/// left limit.
pub fn ddconv_backward(
    y: &Tensor,
    k: &DepthwiseKernel,
    tau: &OffsetField,
    padding: Padding,
    gout: &Tensor,
) -> Result<DdconvGrads> {
    let (g_n, len) = check_input("ddconv_backward", y, k)?;
    let (pad, out_len) = padding.resolve(len, k)?;
    check_offsets("ddconv_backward", tau, out_len, k.taps())?;
    if gout.shape() != [g_n, out_len] {
        return Err(Error::dim(
            "ddconv_backward",
            format!("[{g_n}, {out_len}]"),
            format!("{:?}", gout.shape()),
        ));
    }
    let p_n = k.taps();
    let mut gy = Tensor::zeros(&[g_n, len]);
    let mut gk = Tensor::zeros(&[g_n, p_n]);
    let mut gtau = Tensor::zeros(&[out_len, p_n]);
    let mut tau_acc = vec![0.0; out_len];
    for p in 0..p_n {
        let st = stencils_for_tap(tau, p, k, pad, len, out_len);
        tau_acc.fill(0.0);
        for g in 0..g_n {
            let kv = k.weights.at(g, p);
            let yrow = y.row(g);
            let grow = gout.row(g);
            let gyrow = gy.row_mut(g);
            let mut kacc = 0.0;
            for ((s, &go), ta) in st.iter().zip(grow).zip(tau_acc.iter_mut()) {
                kacc += go * (s.w[0] * yrow[s.idx[0]] + s.w[1] * yrow[s.idx[1]]);
                let gk_scaled = go * kv;
                gyrow[s.idx[0]] += gk_scaled * s.w[0];
                gyrow[s.idx[1]] += gk_scaled * s.w[1];
                *ta += gk_scaled * (s.slope[0] * yrow[s.slope_idx[0]] + s.slope[1] * yrow[s.slope_idx[1]]);
            }
            gk.data_mut()[g * p_n + p] = kacc;
        }
        for (l, &v) in tau_acc.iter().enumerate() {
            gtau.data_mut()[l * p_n + p] = v;
        }
    }
    Ok(DdconvGrads {
        y: gy,
        kernel: gk,
        tau: gtau,
    })
}
