//! Global and cumulative layer normalization over `[C, T]` feature maps.

use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const NORM_EPS: f64 = 1e-8;

fn check_affine(op: &'static str, x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    let (c, t) = x.dims2()?;
    if t == 0 {
        return Err(Error::EmptyInput(op));
    }
    if gain.len() != c || bias.len() != c {
        return Err(Error::dim(
            op,
            format!("gain/bias of len {c}"),
            format!("{}/{}", gain.len(), bias.len()),
        ));
    }
    Ok((c, t))
}

fn affine(xhat: &Tensor, gain: &Tensor, bias: &Tensor, t: usize) -> Tensor {
    let mut out = xhat.clone();
    for (c, row) in out.data_mut().chunks_exact_mut(t).enumerate() {
        let (g, b) = (gain.data()[c], bias.data()[c]);
        row.iter_mut().for_each(|v| *v = g * *v + b);
    }
    out
}

fn affine_backward(
    xhat: &Tensor,
    gain: &Tensor,
    gout: &Tensor,
    ggain: &mut Tensor,
    gbias: &mut Tensor,
    t: usize,
) -> Tensor {
    let mut dxhat = gout.clone();
    for (c, (drow, (grow, hrow))) in dxhat
        .data_mut()
        .chunks_exact_mut(t)
        .zip(gout.data().chunks_exact(t).zip(xhat.data().chunks_exact(t)))
        .enumerate()
    {
        ggain.data_mut()[c] += grow.iter().zip(hrow).map(|(g, h)| g * h).sum::<f64>();
        gbias.data_mut()[c] += grow.iter().sum::<f64>();
        let g = gain.data()[c];
        drow.iter_mut().for_each(|v| *v *= g);
    }
    dxhat
}

#[derive(Debug, Clone)]
pub struct GlnCache {
    xhat: Tensor,
    inv_std: f64,
}

impl GlnCache {
    /// Normalized activations before the affine transform.
    pub fn normalized(&self) -> &Tensor {
        &self.xhat
    }
}

/// Normalizes jointly over channels and time, then applies a per-channel affine.
pub fn global_layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<(Tensor, GlnCache)> {
    let (_, t) = check_affine("global_layer_norm", x, gain, bias)?;
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let var = x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + NORM_EPS).sqrt();
    let xhat = x.map(|v| (v - mean) * inv_std);
    let out = affine(&xhat, gain, bias, t);
    Ok((out, GlnCache { xhat, inv_std }))
}

pub fn global_layer_norm_backward(
    cache: &GlnCache,
    gain: &Tensor,
    gout: &Tensor,
    ggain: &mut Tensor,
    gbias: &mut Tensor,
) -> Result<Tensor> {
    let (_, t) = cache.xhat.dims2()?;
    if gout.shape() != cache.xhat.shape() {
        return Err(Error::dim(
            "global_layer_norm_backward",
            format!("{:?}", cache.xhat.shape()),
            format!("{:?}", gout.shape()),
        ));
    }
    let mut dx = affine_backward(&cache.xhat, gain, gout, ggain, gbias, t);
    let n = dx.len() as f64;
    let mean_d = dx.sum() / n;
    let mean_dh = dx.data().iter().zip(cache.xhat.data()).map(|(d, h)| d * h).sum::<f64>() / n;
    for (d, &h) in dx.data_mut().iter_mut().zip(cache.xhat.data()) {
        *d = (*d - mean_d - h * mean_dh) * cache.inv_std;
    }
    Ok(dx)
}

#[derive(Debug, Clone)]
pub struct ClnCache {
    x: Tensor,
    xhat: Tensor,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl ClnCache {
    pub fn normalized(&self) -> &Tensor {
        &self.xhat
    }
}

/// Frame `t` is normalized with statistics over all channels and frames `0..=t`.
pub fn cumulative_layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<(Tensor, ClnCache)> {
    let (c, t) = check_affine("cumulative_layer_norm", x, gain, bias)?;
    let mut mean = vec![0.0; t];
    let mut inv_std = vec![0.0; t];
    let (mut s1, mut s2) = (0.0, 0.0);
    for tau in 0..t {
        for ch in 0..c {
            let v = x.data()[ch * t + tau];
            s1 += v;
            s2 += v * v;
        }
        let n = (c * (tau + 1)) as f64;
        let mu = s1 / n;
        let var = (s2 / n - mu * mu).max(0.0);
        mean[tau] = mu;
        inv_std[tau] = 1.0 / (var + NORM_EPS).sqrt();
    }
    let mut xhat = x.clone();
    for row in xhat.data_mut().chunks_exact_mut(t) {
        for (tau, v) in row.iter_mut().enumerate() {
            *v = (*v - mean[tau]) * inv_std[tau];
        }
    }
    let out = affine(&xhat, gain, bias, t);
    Ok((
        out,
        ClnCache {
            x: x.clone(),
            xhat,
            mean,
            inv_std,
        },
    ))
}

pub fn cumulative_layer_norm_backward(
    cache: &ClnCache,
    gain: &Tensor,
    gout: &Tensor,
    ggain: &mut Tensor,
    gbias: &mut Tensor,
) -> Result<Tensor> {
    let (c, t) = cache.xhat.dims2()?;
    if gout.shape() != cache.xhat.shape() {
        return Err(Error::dim(
            "cumulative_layer_norm_backward",
            format!("{:?}", cache.xhat.shape()),
            format!("{:?}", gout.shape()),
        ));
    }
    let dxhat = affine_backward(&cache.xhat, gain, gout, ggain, gbias, t);

    // Per-frame sensitivities to the running mean and running second moment.
    let mut d_mean = vec![0.0; t];
    let mut d_m2 = vec![0.0; t];
    for tau in 0..t {
        let (mut a, mut d) = (0.0, 0.0);
        for ch in 0..c {
            let i = ch * t + tau;
            a += dxhat.data()[i];
            d += dxhat.data()[i] * cache.xhat.data()[i];
        }
        let is = cache.inv_std[tau];
        let d_var = -0.5 * d * is * is;
        d_mean[tau] = -a * is - 2.0 * cache.mean[tau] * d_var;
        d_m2[tau] = d_var;
    }
    // Suffix sums: frame tau feeds the statistics of every later frame.
    let mut s1 = vec![0.0; t];
    let mut s2 = vec![0.0; t];
    let (mut acc1, mut acc2) = (0.0, 0.0);
    for tau in (0..t).rev() {
        let n = (c * (tau + 1)) as f64;
        acc1 += d_mean[tau] / n;
        acc2 += d_m2[tau] / n;
        s1[tau] = acc1;
        s2[tau] = acc2;
    }
    let mut dx = dxhat;
    for (ch, row) in dx.data_mut().chunks_exact_mut(t).enumerate() {
        for (tau, v) in row.iter_mut().enumerate() {
            let xv = cache.x.data()[ch * t + tau];
            *v = *v * cache.inv_std[tau] + s1[tau] + 2.0 * xv * s2[tau];
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_affine(c: usize) -> (Tensor, Tensor) {
        (Tensor::full(&[c], 1.0), Tensor::zeros(&[c]))
    }

    #[test]
    fn gln_constant_input_is_zero() {
        let x = Tensor::full(&[3, 4], 2.5);
        let (g, b) = unit_affine(3);
        let (out, _) = global_layer_norm(&x, &g, &b).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gln_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[5, 17], &mut rng).map(|v| 3.0 * v + 1.0);
        let (g, b) = unit_affine(5);
        let (_, cache) = global_layer_norm(&x, &g, &b).unwrap();
        let h = cache.normalized();
        let n = h.len() as f64;
        let mean = h.sum() / n;
        let var = h.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn gln_zero_gain_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[2, 6], &mut rng);
        let (out, _) = global_layer_norm(&x, &Tensor::zeros(&[2]), &Tensor::full(&[2], 0.75)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn cln_single_frame_is_layer_norm() {
        let x = Tensor::from_vec(&[4, 1], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let (g, b) = unit_affine(4);
        let (c_out, _) = cumulative_layer_norm(&x, &g, &b).unwrap();
        let (g_out, _) = global_layer_norm(&x, &g, &b).unwrap();
        assert!(c_out.max_abs_diff(&g_out).unwrap() < 1e-15);
    }

    #[test]
    fn cln_constant_input_is_zero() {
        let x = Tensor::full(&[3, 5], -1.25);
        let (g, b) = unit_affine(3);
        let (out, _) = cumulative_layer_norm(&x, &g, &b).unwrap();
        assert!(out.data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn cln_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[3, 12], &mut rng);
        let mut y = x.clone();
        for ch in 0..3 {
            for tau in 7..12 {
                y.data_mut()[ch * 12 + tau] += 10.0 * (tau as f64);
            }
        }
        let g = Tensor::from_vec(&[3], vec![0.5, 1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[3], vec![0.1, -0.2, 0.3]).unwrap();
        let (ox, _) = cumulative_layer_norm(&x, &g, &b).unwrap();
        let (oy, _) = cumulative_layer_norm(&y, &g, &b).unwrap();
        for ch in 0..3 {
            for tau in 0..7 {
                assert_eq!(ox.at(ch, tau), oy.at(ch, tau));
            }
        }
    }

    #[test]
    fn empty_time_axis_rejected() {
        let x = Tensor::zeros(&[3, 0]);
        let (g, b) = unit_affine(3);
        assert!(matches!(global_layer_norm(&x, &g, &b), Err(Error::EmptyInput(_))));
    }
}
