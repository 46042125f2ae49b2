use ndarray::Array2;

use crate::error::{Error, Result};
use crate::imaging::{gray_plane, ImageTensor};

/// PSNR reported for (near-)identical images.
pub const PSNR_CAP_DB: f64 = 100.0;
/// Below this MSE the PSNR is capped.
pub const PSNR_MIN_MSE: f64 = 1e-10;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_same(x: &ImageTensor, y: &ImageTensor) -> Result<()> {
    if x.data().shape() != y.data().shape() {
        return Err(Error::Shape(format!(
            "metric operands differ in shape: {:?} vs {:?}",
            x.data().shape(),
            y.data().shape()
        )));
    }
    Ok(())
}

/// Mean squared difference over every element, on `[0, 1]` intensities.
pub fn mse(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    check_same(x, y)?;
    let n = x.data().len() as f64;
    Ok(x.data()
        .iter()
        .zip(y.data().iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// `10 log10(1 / mse)` in dB, capped at [`PSNR_CAP_DB`].
pub fn psnr(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, y)?))
}

pub fn psnr_from_mse(m: f64) -> f64 {
    if m < PSNR_MIN_MSE {
        PSNR_CAP_DB
    } else {
        10.0 * (1.0 / m).log10()
    }
}

/// Normalized 1-D Gaussian of `size` taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let k: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable correlation keeping only positions where the window fits.
pub fn filter_valid(x: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let n = k.len();
    let (ho, wo) = (h + 1 - n, w + 1 - n);
    let rows = Array2::from_shape_fn((h, wo), |(y, c)| -> f64 {
        (0..n).map(|i| k[i] * x[[y, c + i]]).sum()
    });
    Array2::from_shape_fn((ho, wo), |(r, c)| -> f64 {
        (0..n).map(|i| k[i] * rows[[r + i, c]]).sum()
    })
}

/// Mean SSIM of one pair of gray planes over all valid windows.
pub fn ssim_plane(x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    let (h, w) = x.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::TooSmall(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let mx = filter_valid(x, &k);
    let my = filter_valid(y, &k);
    let mxx = filter_valid(&(x * x), &k);
    let myy = filter_valid(&(y * y), &k);
    let mxy = filter_valid(&(x * y), &k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for (idx, &ux) in mx.indexed_iter() {
        let uy = my[idx];
        let vx = mxx[idx] - ux * ux;
        let vy = myy[idx] - uy * uy;
        let vxy = mxy[idx] - ux * uy;
        total +=
            ((2.0 * ux * uy + c1) * (2.0 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

/// Single-scale SSIM on BT.601 luminance, averaged over the batch.
pub fn ssim(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    check_same(x, y)?;
    let mut total = 0.0;
    for n in 0..x.batch() {
        total += ssim_plane(&gray_plane(x, n), &gray_plane(y, n))?;
    }
    Ok(total / x.batch() as f64)
}
