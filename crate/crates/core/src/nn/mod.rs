//! Differentiable building blocks. Every layer exposes a forward pass and a
//! backward pass that returns the input gradient and accumulates parameter
//! gradients into a [`WeightStore`](crate::weights::WeightStore).

mod conv;
pub mod fft;
mod norm;

pub use conv::{Conv2d, Linear};
pub use norm::{GroupNorm, NormCache};

use ndarray::{Array2, Array4, Axis, Zip};

/// Negative slope of the leaky rectifier used throughout the networks.
pub const LEAKY_SLOPE: f64 = 0.2;

pub fn leaky_relu(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
}

/// Gradient of [`leaky_relu`] given its input `x`.
pub fn leaky_relu_backward(x: &Array4<f64>, dy: &Array4<f64>) -> Array4<f64> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(x).for_each(|d, &v| {
        if v <= 0.0 {
            *d *= LEAKY_SLOPE;
        }
    });
    dx
}

pub fn relu(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(x: &Array4<f64>, dy: &Array4<f64>) -> Array4<f64> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(x).for_each(|d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Spatial mean per image and channel: `(N, C, H, W) -> (N, C)`.
pub fn global_avg_pool(x: &Array4<f64>) -> Array2<f64> {
    let (_, _, h, w) = x.dim();
    x.sum_axis(Axis(3)).sum_axis(Axis(2)) / (h * w) as f64
}

pub fn global_avg_pool_backward(dy: &Array2<f64>, h: usize, w: usize) -> Array4<f64> {
    let (n, c) = dy.dim();
    let scale = 1.0 / (h * w) as f64;
    Array4::from_shape_fn((n, c, h, w), |(i, ch, _, _)| dy[[i, ch]] * scale)
}

/// Broadcast multiply by a per-(image, channel) factor.
pub fn scale_channels(x: &Array4<f64>, s: &Array2<f64>) -> Array4<f64> {
    let mut y = x.clone();
    for ((i, c), f) in s.indexed_iter() {
        y.slice_mut(ndarray::s![i, c, .., ..])
            .mapv_inplace(|v| v * f);
    }
    y
}

/// Sum over spatial positions of `a * b`: `(N, C)`.
pub fn spatial_dot(a: &Array4<f64>, b: &Array4<f64>) -> Array2<f64> {
    (a * b).sum_axis(Axis(3)).sum_axis(Axis(2))
}

/// Concatenates along the channel axis.
pub fn concat_channels(parts: &[Array4<f64>]) -> Array4<f64> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(1), &views).expect("matching batch and spatial dims")
}

/// Channel range `[start, end)` as an owned array.
pub fn channel_slice(x: &Array4<f64>, start: usize, end: usize) -> Array4<f64> {
    x.slice(ndarray::s![.., start..end, .., ..]).to_owned()
}
