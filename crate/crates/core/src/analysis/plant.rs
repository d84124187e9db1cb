//! Synthetic offset traces with a prescribed correlation between the
//! per-utterance mean offsets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::analysis::OffsetTrace;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Default correlations between `tau_1`, `tau_2` and `tau_3` for planted traces.
pub const TARGET_CORRELATIONS: [[f64; 3]; 3] = [[1.0, -0.88, -0.99], [-0.88, 1.0, 0.81], [-0.99, 0.81, 1.0]];

fn cholesky(r: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let k = r.len();
    let mut l = vec![vec![0.0; k]; k];
    for i in 0..k {
        if r[i].len() != k {
            return Err(Error::dim("planted_means", format!("{k} columns"), r[i].len()));
        }
        for j in 0..=i {
            let s: f64 = r[i][j] - (0..j).map(|m| l[i][m] * l[j][m]).sum::<f64>();
            if i == j {
                if s <= 0.0 {
                    return Err(Error::InvalidArgument(
                        "planted_means: correlation matrix is not positive definite".into(),
                    ));
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    Ok(l)
}

/// `n` rows of `k` mean offsets whose sample correlation matrix equals
/// `corr` up to rounding. Columns have standard deviation `scale`.
pub fn planted_means(corr: &[Vec<f64>], n: usize, scale: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    let k = corr.len();
    if k == 0 || n <= k {
        return Err(Error::InvalidArgument(format!(
            "planted_means: need more rows ({n}) than columns ({k})"
        )));
    }
    let l = cholesky(corr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Centred, orthonormal columns.
    let mut q: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    for j in 0..k {
        let mean = q[j].iter().sum::<f64>() / n as f64;
        q[j].iter_mut().for_each(|v| *v -= mean);
        for i in 0..j {
            let d: f64 = q[j].iter().zip(&q[i]).map(|(a, b)| a * b).sum();
            let prev = q[i].clone();
            q[j].iter_mut().zip(&prev).for_each(|(a, b)| *a -= d * b);
        }
        let norm = q[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        q[j].iter_mut().for_each(|v| *v /= norm);
    }
    let s = scale * (n as f64).sqrt();
    Ok((0..n)
        .map(|u| {
            (0..k)
                .map(|c| s * (0..=c).map(|m| l[c][m] * q[m][u]).sum::<f64>())
                .collect()
        })
        .collect())
}

/// Traces for `blocks` blocks per utterance. Block `hot` carries `means` with
/// a large frame-to-frame ripple; the others carry a tenth of both. Ripples
/// come in `+a, -a` pairs so every column mean is exactly the planted one.
pub fn planted_traces(
    means: &[Vec<f64>],
    blocks: usize,
    frames: usize,
    hot: usize,
    seed: u64,
) -> Result<Vec<Vec<OffsetTrace>>> {
    if frames == 0 || !frames.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "planted_traces: frames must be even and positive, got {frames}"
        )));
    }
    if hot >= blocks {
        return Err(Error::InvalidArgument(format!(
            "planted_traces: block {hot} out of {blocks}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(means
        .iter()
        .map(|m| {
            (0..blocks)
                .map(|b| {
                    let gain = if b == hot { 1.0 } else { 0.1 };
                    let mut tau = Tensor::zeros(&[frames, m.len()]);
                    for l in (0..frames).step_by(2) {
                        for (p, &mu) in m.iter().enumerate() {
                            let a: f64 = rng.gen_range(-1.0..1.0);
                            tau.row_mut(l)[p] = gain * (mu + a);
                            tau.row_mut(l + 1)[p] = gain * (mu - a);
                        }
                    }
                    OffsetTrace { block: b, tau }
                })
                .collect()
        })
        .collect())
}
