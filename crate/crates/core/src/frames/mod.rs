//! Waveform framing, the learned encoder/decoder pair, masking, and overlap-add.
//!
//! Frames are rectangular with exactly 50 % overlap (`hop = block_len / 2`).
//! The input is zero-padded at the tail so the last frame is complete, and
//! reconstruction divides each sample by the number of frames covering it, so
//! `overlap_add(segment(x))` returns `x` exactly.

mod wav;

pub use wav::{read_wav, write_wav};

use crate::error::{Error, Result};
use crate::numcore::gemm::{gemm, MatRef};
use crate::numcore::Tensor;

pub const DEFAULT_SAMPLE_RATE: u32 = 8000;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            (self.energy() / self.samples.len() as f64).sqrt()
        }
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self::new(self.samples.iter().map(|v| v * gain).collect(), self.sample_rate)
    }
}

/// Overlapping analysis frames, one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatrix {
    pub frames: Tensor,
    pub hop: usize,
}

impl FrameMatrix {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn block_len(&self) -> usize {
        self.frames.shape()[1]
    }

    /// Longest waveform these frames cover.
    pub fn span(&self) -> usize {
        match self.num_frames() {
            0 => 0,
            n => (n - 1) * self.hop + self.block_len(),
        }
    }
}

/// Encoder output, stored channel-major as `[N, L_x]` so the mask network can
/// run 1x1 and depthwise convolutions along a contiguous time axis.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSeq {
    pub features: Tensor,
}

impl EncodedSeq {
    pub fn channels(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn num_frames(&self) -> usize {
        self.features.shape()[1]
    }
}

fn check_block_len(block_len: usize) -> Result<()> {
    if block_len < 2 || !block_len.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "block length must be even and >= 2, got {block_len}"
        )));
    }
    Ok(())
}

/// Length after tail padding so that frames tile the signal exactly.
pub fn padded_len(len: usize, block_len: usize) -> usize {
    let hop = block_len / 2;
    if len <= block_len {
        block_len
    } else {
        block_len + (len - block_len).div_ceil(hop) * hop
    }
}

pub fn num_frames(len: usize, block_len: usize) -> usize {
    (padded_len(len, block_len) - block_len) / (block_len / 2) + 1
}

pub fn segment(x: &Waveform, block_len: usize) -> Result<FrameMatrix> {
    check_block_len(block_len)?;
    if x.is_empty() {
        return Err(Error::EmptyInput("segment"));
    }
    let hop = block_len / 2;
    let n = num_frames(x.len(), block_len);
    let mut frames = Tensor::zeros(&[n, block_len]);
    for l in 0..n {
        let start = l * hop;
        let end = (start + block_len).min(x.len());
        if start < end {
            frames.row_mut(l)[..end - start].copy_from_slice(&x.samples[start..end]);
        }
    }
    Ok(FrameMatrix { frames, hop })
}

/// Adjoint of [`segment`]: scatters frame gradients back onto the waveform.
pub fn segment_backward(gframes: &FrameMatrix, len: usize) -> Vec<f64> {
    let mut g = vec![0.0; len];
    let block_len = gframes.block_len();
    for l in 0..gframes.num_frames() {
        let start = l * gframes.hop;
        for (j, &v) in gframes.frames.row(l).iter().enumerate().take(block_len) {
            if let Some(slot) = g.get_mut(start + j) {
                *slot += v;
            }
        }
    }
    g
}

fn overlap_counts(n_frames: usize, hop: usize, block_len: usize, len: usize) -> Vec<f64> {
    let mut counts = vec![0.0; len];
    for l in 0..n_frames {
        let start = l * hop;
        for c in counts.iter_mut().skip(start).take(block_len) {
            *c += 1.0;
        }
    }
    counts
}

pub fn overlap_add(frames: &FrameMatrix, out_len: usize, sample_rate: u32) -> Result<Waveform> {
    let block_len = frames.block_len();
    if frames.hop * 2 != block_len {
        return Err(Error::InvalidArgument(format!(
            "hop {} is not half of block length {block_len}",
            frames.hop
        )));
    }
    if out_len > frames.span() {
        return Err(Error::InvalidArgument(format!(
            "requested {out_len} samples but frames only cover {}",
            frames.span()
        )));
    }
    let counts = overlap_counts(frames.num_frames(), frames.hop, block_len, out_len);
    let mut out = vec![0.0; out_len];
    for l in 0..frames.num_frames() {
        let start = l * frames.hop;
        for (j, &v) in frames.frames.row(l).iter().enumerate() {
            if let Some(slot) = out.get_mut(start + j) {
                *slot += v;
            }
        }
    }
    for (o, c) in out.iter_mut().zip(&counts) {
        *o /= c;
    }
    Ok(Waveform::new(out, sample_rate))
}

/// Gradient of [`overlap_add`] with respect to the frames.
pub fn overlap_add_backward(gout: &[f64], n_frames: usize, block_len: usize) -> FrameMatrix {
    let hop = block_len / 2;
    let counts = overlap_counts(n_frames, hop, block_len, gout.len());
    let mut frames = Tensor::zeros(&[n_frames, block_len]);
    for l in 0..n_frames {
        let start = l * hop;
        for (j, slot) in frames.row_mut(l).iter_mut().enumerate() {
            let i = start + j;
            if i < gout.len() {
                *slot = gout[i] / counts[i];
            }
        }
    }
    FrameMatrix { frames, hop }
}

/// `w_l = relu(x_l B)` for every frame; `basis` is `[block_len, N]`, no bias.
pub fn encode(frames: &FrameMatrix, basis: &Tensor) -> Result<EncodedSeq> {
    let (lx, lb) = frames.frames.dims2()?;
    let (b_rows, n) = basis.dims2()?;
    if b_rows != lb {
        return Err(Error::dim("encode", format!("basis rows {lb}"), b_rows));
    }
    let mut features = Tensor::zeros(&[n, lx]);
    gemm(
        1.0,
        MatRef::new(basis.data(), lb, n).t(),
        MatRef::new(frames.frames.data(), lx, lb).t(),
        0.0,
        features.data_mut(),
    );
    features.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(EncodedSeq { features })
}

/// Returns the frame gradient and adds the basis gradient into `gbasis`.
pub fn encode_backward(
    frames: &FrameMatrix,
    basis: &Tensor,
    encoded: &EncodedSeq,
    gfeat: &Tensor,
    gbasis: &mut Tensor,
) -> Result<FrameMatrix> {
    let (lx, lb) = frames.frames.dims2()?;
    let (_, n) = basis.dims2()?;
    if gfeat.shape() != [n, lx] {
        return Err(Error::dim(
            "encode_backward",
            format!("[{n}, {lx}]"),
            format!("{:?}", gfeat.shape()),
        ));
    }
    let mut gpre = gfeat.clone();
    for (g, &w) in gpre.data_mut().iter_mut().zip(encoded.features.data()) {
        if w <= 0.0 {
            *g = 0.0;
        }
    }
    gemm(
        1.0,
        MatRef::new(frames.frames.data(), lx, lb).t(),
        MatRef::new(gpre.data(), n, lx).t(),
        1.0,
        gbasis.data_mut(),
    );
    let mut gframes = Tensor::zeros(&[lx, lb]);
    gemm(
        1.0,
        MatRef::new(gpre.data(), n, lx).t(),
        MatRef::new(basis.data(), lb, n).t(),
        0.0,
        gframes.data_mut(),
    );
    Ok(FrameMatrix {
        frames: gframes,
        hop: frames.hop,
    })
}

/// Hadamard product `w ⊙ m`.
pub fn apply_mask(w: &EncodedSeq, m: &EncodedSeq) -> Result<EncodedSeq> {
    if w.features.shape() != m.features.shape() {
        return Err(Error::dim(
            "apply_mask",
            format!("{:?}", w.features.shape()),
            format!("{:?}", m.features.shape()),
        ));
    }
    let data = w
        .features
        .data()
        .iter()
        .zip(m.features.data())
        .map(|(a, b)| a * b)
        .collect();
    Ok(EncodedSeq {
        features: Tensor::from_vec(w.features.shape(), data)?,
    })
}

/// `(d/dw, d/dm)` of the Hadamard product.
pub fn apply_mask_backward(w: &EncodedSeq, m: &EncodedSeq, gv: &Tensor) -> Result<(Tensor, Tensor)> {
    let prod = |a: &Tensor, b: &Tensor| -> Result<Tensor> {
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        Tensor::from_vec(a.shape(), data)
    };
    if gv.shape() != w.features.shape() {
        return Err(Error::dim(
            "apply_mask_backward",
            format!("{:?}", w.features.shape()),
            format!("{:?}", gv.shape()),
        ));
    }
    Ok((prod(gv, &m.features)?, prod(gv, &w.features)?))
}

/// `s_l = v_l U` for every frame; `synthesis` is `[N, block_len]`.
pub fn decode(v: &EncodedSeq, synthesis: &Tensor) -> Result<FrameMatrix> {
    let (n, lx) = v.features.dims2()?;
    let (u_rows, lb) = synthesis.dims2()?;
    if u_rows != n {
        return Err(Error::dim("decode", format!("synthesis rows {n}"), u_rows));
    }
    check_block_len(lb)?;
    let mut frames = Tensor::zeros(&[lx, lb]);
    gemm(
        1.0,
        MatRef::new(v.features.data(), n, lx).t(),
        MatRef::new(synthesis.data(), n, lb),
        0.0,
        frames.data_mut(),
    );
    Ok(FrameMatrix { frames, hop: lb / 2 })
}

/// Returns the feature gradient and adds the synthesis gradient into `gsynth`.
pub fn decode_backward(
    v: &EncodedSeq,
    synthesis: &Tensor,
    gframes: &FrameMatrix,
    gsynth: &mut Tensor,
) -> Result<Tensor> {
    let (n, lx) = v.features.dims2()?;
    let (_, lb) = synthesis.dims2()?;
    if gframes.frames.shape() != [lx, lb] {
        return Err(Error::dim(
            "decode_backward",
            format!("[{lx}, {lb}]"),
            format!("{:?}", gframes.frames.shape()),
        ));
    }
    gemm(
        1.0,
        MatRef::new(v.features.data(), n, lx),
        MatRef::new(gframes.frames.data(), lx, lb),
        1.0,
        gsynth.data_mut(),
    );
    let mut gv = Tensor::zeros(&[n, lx]);
    gemm(
        1.0,
        MatRef::new(synthesis.data(), n, lb),
        MatRef::new(gframes.frames.data(), lx, lb).t(),
        0.0,
        gv.data_mut(),
    );
    Ok(gv)
}
