//! Pointwise convolution and activations with their vector-Jacobian products.
//!
//! Backward functions return the input gradient and *accumulate* into the
//! parameter-gradient tensors they are handed.

use crate::error::{Error, Result};
use crate::numcore::gemm::{gemm, MatRef};
use crate::numcore::Tensor;

/// 1x1 convolution over channels: `out[c, t] = b[c] + sum_j x[j, t] * w[j, c]`.
pub fn channel_linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (c_in, t) = x.dims2()?;
    let (w_in, c_out) = w.dims2()?;
    if w_in != c_in {
        return Err(Error::dim("channel_linear", format!("weight rows {c_in}"), w_in));
    }
    if b.len() != c_out {
        return Err(Error::dim("channel_linear", format!("bias len {c_out}"), b.len()));
    }
    let mut out = Tensor::zeros(&[c_out, t]);
    for (c, row) in out.data_mut().chunks_exact_mut(t.max(1)).enumerate() {
        row.fill(b.data()[c]);
    }
    gemm(
        1.0,
        MatRef::new(w.data(), c_in, c_out).t(),
        MatRef::new(x.data(), c_in, t),
        1.0,
        out.data_mut(),
    );
    Ok(out)
}

/// Returns `d/dx`; adds `d/dw` into `gw` and `d/db` into `gb`.
pub fn channel_linear_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    gw: &mut Tensor,
    gb: &mut Tensor,
) -> Result<Tensor> {
    let (c_in, t) = x.dims2()?;
    let (_, c_out) = w.dims2()?;
    if gout.shape() != [c_out, t] {
        return Err(Error::dim(
            "channel_linear_backward",
            format!("[{c_out}, {t}]"),
            format!("{:?}", gout.shape()),
        ));
    }
    let mut gx = Tensor::zeros(&[c_in, t]);
    gemm(
        1.0,
        MatRef::new(w.data(), c_in, c_out),
        MatRef::new(gout.data(), c_out, t),
        0.0,
        gx.data_mut(),
    );
    gemm(
        1.0,
        MatRef::new(x.data(), c_in, t),
        MatRef::new(gout.data(), c_out, t).t(),
        1.0,
        gw.data_mut(),
    );
    if t > 0 {
        for (g, row) in gb.data_mut().iter_mut().zip(gout.data().chunks_exact(t)) {
            *g += row.iter().sum::<f64>();
        }
    }
    Ok(gx)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient passes where the input was strictly positive.
pub fn relu_backward(x: &Tensor, gout: &Tensor) -> Result<Tensor> {
    if x.shape() != gout.shape() {
        return Err(Error::dim(
            "relu_backward",
            format!("{:?}", x.shape()),
            format!("{:?}", gout.shape()),
        ));
    }
    let data = x
        .data()
        .iter()
        .zip(gout.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// Slope for channel `c` of a `[C, T]` input: scalar or per-channel.
fn slope_for(a: &Tensor, c: usize) -> f64 {
    if a.len() == 1 {
        a.data()[0]
    } else {
        a.data()[c]
    }
}

fn check_slope(x: &Tensor, a: &Tensor) -> Result<(usize, usize)> {
    let (c, t) = match x.shape() {
        &[c, t] => (c, t),
        s => (1, s.iter().product()),
    };
    if a.len() != 1 && a.len() != c {
        return Err(Error::dim("prelu", format!("1 or {c} slopes"), a.len()));
    }
    Ok((c, t))
}

/// `x` where `x >= 0`, `a * x` otherwise.
pub fn prelu(x: &Tensor, a: &Tensor) -> Result<Tensor> {
    let (_, t) = check_slope(x, a)?;
    let mut out = x.clone();
    if t == 0 {
        return Ok(out);
    }
    for (c, row) in out.data_mut().chunks_exact_mut(t).enumerate() {
        let s = slope_for(a, c);
        for v in row {
            if *v < 0.0 {
                *v *= s;
            }
        }
    }
    Ok(out)
}

/// Returns `d/dx`; adds `d/da` into `ga`.
pub fn prelu_backward(x: &Tensor, a: &Tensor, gout: &Tensor, ga: &mut Tensor) -> Result<Tensor> {
    let (_, t) = check_slope(x, a)?;
    if x.shape() != gout.shape() {
        return Err(Error::dim(
            "prelu_backward",
            format!("{:?}", x.shape()),
            format!("{:?}", gout.shape()),
        ));
    }
    let mut gx = gout.clone();
    if t == 0 {
        return Ok(gx);
    }
    let per_channel = a.len() != 1;
    for (c, (grow, xrow)) in gx
        .data_mut()
        .chunks_exact_mut(t)
        .zip(x.data().chunks_exact(t))
        .enumerate()
    {
        let s = slope_for(a, c);
        let mut acc = 0.0;
        for (g, &v) in grow.iter_mut().zip(xrow) {
            if v < 0.0 {
                acc += *g * v;
                *g *= s;
            }
        }
        ga.data_mut()[if per_channel { c } else { 0 }] += acc;
    }
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn channel_linear_identity_weights() {
        let x = t2(&[&[1.0, -2.0, 3.0], &[0.5, 0.0, 4.0]]);
        let w = t2(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = Tensor::zeros(&[2]);
        assert_eq!(channel_linear(&x, &w, &b).unwrap(), x);
    }

    #[test]
    fn channel_linear_hand_value() {
        // x[:, t] = [1, 2], w = [[3], [5]], b = [1]: 1 + 3 + 10 = 14
        let x = t2(&[&[1.0, 1.0], &[2.0, 2.0]]);
        let w = t2(&[&[3.0], &[5.0]]);
        let b = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let out = channel_linear(&x, &w, &b).unwrap();
        assert_eq!(out.data(), &[14.0, 14.0]);
    }

    #[test]
    fn channel_linear_zero_input() {
        let x = Tensor::zeros(&[3, 5]);
        let w = Tensor::full(&[3, 2], 0.7);
        let out = channel_linear(&x, &w, &Tensor::zeros(&[2])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_linear_shape_mismatch() {
        let x = Tensor::zeros(&[3, 5]);
        let w = Tensor::zeros(&[2, 2]);
        assert!(matches!(
            channel_linear(&x, &w, &Tensor::zeros(&[2])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn relu_cases() {
        let x = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::full(&[4], -3.0);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
        let pos = Tensor::full(&[4], 1.5);
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn prelu_cases() {
        let x = Tensor::from_vec(&[1, 2], vec![-2.0, 3.0]).unwrap();
        let a = Tensor::from_vec(&[1], vec![0.25]).unwrap();
        assert_eq!(prelu(&x, &a).unwrap().data(), &[-0.5, 3.0]);
        assert_eq!(prelu(&x, &Tensor::zeros(&[1])).unwrap(), relu(&x));
        assert_eq!(prelu(&x, &Tensor::full(&[1], 1.0)).unwrap(), x);
    }

    #[test]
    fn prelu_per_channel_slopes() {
        let x = t2(&[&[-1.0, 1.0], &[-1.0, 1.0]]);
        let a = Tensor::from_vec(&[2], vec![0.1, 0.5]).unwrap();
        assert_eq!(prelu(&x, &a).unwrap().data(), &[-0.1, 1.0, -0.5, 1.0]);
        assert!(prelu(&x, &Tensor::zeros(&[3])).is_err());
    }
}
