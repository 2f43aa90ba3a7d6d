//! Activations: elementwise tanh / leaky-ReLU and the radial
//! "isotropic tanh", which squashes the norm of each sample while keeping
//! its direction.

use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

/// Slope of the negative branch of leaky-ReLU.
pub const LEAKY_SLOPE: f64 = 0.01;

/// `f(r) = tanh(r)/r` and `c(r) = (r·sech²r − tanh r)/r³`, the two radial
/// coefficients of isotropic tanh. Near zero both are evaluated by series —
/// the direct form of `c` cancels catastrophically — giving the finite
/// limits f→1, c→−2/3.
fn radial_coefficients(r: f64) -> (f64, f64) {
    if r < 1e-2 {
        let r2 = r * r;
        let f = 1.0 - r2 / 3.0 + 2.0 * r2 * r2 / 15.0;
        let c = -2.0 / 3.0 + 8.0 * r2 / 15.0 - 34.0 * r2 * r2 / 105.0;
        (f, c)
    } else {
        let t = r.tanh();
        let sech = 1.0 / r.cosh();
        let c = (r * sech * sech - t) / (r * r * r);
        (t / r, c)
    }
}

/// Per sample: `y = tanh(‖x‖)·x/‖x‖`, continued by its limit `y = 0` at
/// `x = 0`. Every output has norm `tanh(‖x‖) < 1`.
pub fn isotropic_tanh(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::domain("isotropic_tanh", format!("expected rank-2 input, got {:?}", x.shape())));
    }
    let (bsz, n) = (x.rows(), x.cols());
    let mut y = Tensor::zeros(&[bsz, n]);
    for b in 0..bsz {
        let xr = x.row(b);
        let r = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
        let (f, _) = radial_coefficients(r);
        let yr = &mut y.data_mut()[b * n..(b + 1) * n];
        for j in 0..n {
            yr[j] = f * xr[j];
        }
    }
    y.ensure_finite("isotropic_tanh")?;
    Ok(y)
}

/// `dX = f(r)·g + (g·x)·c(r)·x` per sample; tends to `g` as `x → 0`.
pub fn isotropic_tanh_backward(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    if g.shape() != x.shape() {
        return Err(Error::shape("isotropic_tanh_backward", g.shape(), x.shape()));
    }
    let (bsz, n) = (x.rows(), x.cols());
    let mut dx = Tensor::zeros(&[bsz, n]);
    for b in 0..bsz {
        let xr = x.row(b);
        let gr = g.row(b);
        let r = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
        let (f, c) = radial_coefficients(r);
        let gx = dot(gr, xr);
        let dxr = &mut dx.data_mut()[b * n..(b + 1) * n];
        for j in 0..n {
            dxr[j] = f * gr[j] + gx * c * xr[j];
        }
    }
    dx.ensure_finite("isotropic_tanh_backward")?;
    Ok(dx)
}

/// Pointwise (or radial) nonlinearity applied after a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Tanh,
    /// Slope [`LEAKY_SLOPE`] on the negative branch.
    LeakyRelu,
    IsotropicTanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::None => "none",
            Activation::Tanh => "tanh",
            Activation::LeakyRelu => "leaky_relu",
            Activation::IsotropicTanh => "isotropic_tanh",
        }
    }

    pub fn forward(self, x: &Tensor) -> Result<(Tensor, ActCache)> {
        let y = match self {
            Activation::None => x.clone(),
            Activation::Tanh => x.tanh(),
            Activation::LeakyRelu => x.leaky_relu(LEAKY_SLOPE),
            Activation::IsotropicTanh => isotropic_tanh(x)?,
        };
        Ok((y.clone(), ActCache { x: x.clone(), y }))
    }

    pub fn backward(self, cache: &ActCache, g: &Tensor) -> Result<Tensor> {
        if g.shape() != cache.x.shape() {
            return Err(Error::shape("activation_backward", g.shape(), cache.x.shape()));
        }
        match self {
            Activation::None => Ok(g.clone()),
            Activation::Tanh => {
                // d tanh = 1 − y².
                let mut dx = g.clone();
                for (d, y) in dx.data_mut().iter_mut().zip(cache.y.data()) {
                    *d *= 1.0 - y * y;
                }
                Ok(dx)
            }
            Activation::LeakyRelu => {
                let mut dx = g.clone();
                for (d, x) in dx.data_mut().iter_mut().zip(cache.x.data()) {
                    if *x < 0.0 {
                        *d *= LEAKY_SLOPE;
                    }
                }
                Ok(dx)
            }
            Activation::IsotropicTanh => isotropic_tanh_backward(&cache.x, g),
        }
    }
}

/// Input and output of the activation, retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ActCache {
    pub x: Tensor,
    pub y: Tensor,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn isotropic_tanh_hand_cases() {
        let zero = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert_eq!(isotropic_tanh(&zero).unwrap().data(), &[0.0, 0.0]);

        let x = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let y = isotropic_tanh(&x).unwrap();
        let t5 = 5.0_f64.tanh();
        assert!((y.data()[0] - t5 * 0.6).abs() < 1e-12);
        assert!((y.data()[1] - t5 * 0.8).abs() < 1e-12);
    }

    #[test]
    fn isotropic_tanh_output_norm_below_one() {
        let mut rng = Rng::new(17);
        for _ in 0..50 {
            let x = Tensor::random_normal(&[1, 5], &mut rng).scale(3.0).unwrap();
            let y = isotropic_tanh(&x).unwrap();
            assert!(y.norm() < 1.0);
        }
    }

    #[test]
    fn radial_coefficient_series_matches_direct_form() {
        // Either side of the series/direct switch the values must agree.
        for r in [5e-3_f64, 9e-3, 1.1e-2, 2e-2] {
            let t = r.tanh();
            let sech = 1.0 / r.cosh();
            let f_direct = t / r;
            let c_direct = (r * sech * sech - t) / (r * r * r);
            let (f, c) = radial_coefficients(r);
            assert!((f - f_direct).abs() < 1e-9, "f at {r}");
            assert!((c - c_direct).abs() < 1e-7, "c at {r}: {c} vs {c_direct}");
        }
    }

    #[test]
    fn tanh_and_leaky_relu_backward_hand_cases() {
        let x = Tensor::from_rows(&[vec![-1.0, 0.0, 2.0]]).unwrap();
        let g = Tensor::from_rows(&[vec![1.0, 1.0, 1.0]]).unwrap();

        let (_, cache) = Activation::LeakyRelu.forward(&x).unwrap();
        let dx = Activation::LeakyRelu.backward(&cache, &g).unwrap();
        assert_eq!(dx.data(), &[LEAKY_SLOPE, 1.0, 1.0]);

        let (y, cache) = Activation::Tanh.forward(&x).unwrap();
        let dx = Activation::Tanh.backward(&cache, &g).unwrap();
        for (d, y) in dx.data().iter().zip(y.data()) {
            assert!((d - (1.0 - y * y)).abs() < 1e-15);
        }
    }
}
