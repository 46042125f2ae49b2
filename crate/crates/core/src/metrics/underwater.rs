//! Colour-oriented no-reference scores for underwater images.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::imaging::{gray_plane, plane_view, rgb_to_lab, ImageTensor, LUMA_BT601};

pub const UCIQE_COEFFS: [f64; 3] = [0.4680, 0.2745, 0.2576];
/// Fraction of pixels averaged at each end for the luminance contrast.
pub const UCIQE_TAIL: f64 = 0.01;

pub const UIQM_COEFFS: [f64; 3] = [0.0282, 0.2953, 3.5753];
pub const UIQM_BLOCK: usize = 8;
pub const UICM_TRIM: (f64, f64) = (0.1, 0.1);
pub const UICM_MEAN_WEIGHT: f64 = -0.0268;
pub const UICM_SPREAD_WEIGHT: f64 = 0.1586;

fn check_rgb(img: &ImageTensor) -> Result<()> {
    if img.data().shape()[1] != 3 {
        return Err(Error::Shape("expected an RGB image".into()));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// UCIQE components `(chroma std, luminance contrast, mean saturation)` of
/// image `n`, with `L` and chroma scaled to `[0, 1]` by dividing by 100.
pub fn uciqe_terms(img: &ImageTensor, n: usize) -> [f64; 3] {
    let p = plane_view(img, n);
    let (_, h, w) = p.dim();
    let mut lum = Vec::with_capacity(h * w);
    let mut chroma = Vec::with_capacity(h * w);
    let mut sat = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let [l, a, b] = rgb_to_lab(p[[0, y, x]], p[[1, y, x]], p[[2, y, x]]);
            let l = l / 100.0;
            let c = (a * a + b * b).sqrt() / 100.0;
            lum.push(l);
            chroma.push(c);
            sat.push(if l > 0.0 { c / l } else { 0.0 });
        }
    }
    let mu = mean(&chroma);
    let sigma =
        (chroma.iter().map(|c| (c - mu) * (c - mu)).sum::<f64>() / chroma.len() as f64).sqrt();
    lum.sort_by(f64::total_cmp);
    let k = ((UCIQE_TAIL * lum.len() as f64).round() as usize).max(1);
    let contrast = mean(&lum[lum.len() - k..]) - mean(&lum[..k]);
    [sigma, contrast, mean(&sat)]
}

/// `0.4680 sigma_c + 0.2745 con_l + 0.2576 mu_s` in CIELAB, averaged over the batch.
pub fn uciqe(img: &ImageTensor) -> Result<f64> {
    check_rgb(img)?;
    let total: f64 = (0..img.batch())
        .map(|n| {
            let t = uciqe_terms(img, n);
            UCIQE_COEFFS.iter().zip(t).map(|(c, v)| c * v).sum::<f64>()
        })
        .sum();
    Ok(total / img.batch() as f64)
}

/// Mean of the sorted values after dropping `ceil(aL K)` from the bottom and
/// `floor(aR K)` from the top.
pub fn trimmed_mean(values: &[f64], trim: (f64, f64)) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    let lo = (trim.0 * k as f64).ceil() as usize;
    let hi = (trim.1 * k as f64).floor() as usize;
    let kept = &v[lo.min(k)..k.saturating_sub(hi).max(lo.min(k))];
    if kept.is_empty() {
        return mean(&v);
    }
    mean(kept)
}

fn spread(values: &[f64], mu: f64) -> f64 {
    values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / values.len() as f64
}

/// Colourfulness from the opponent channels `RG = R - G` and
/// `YB = (R + G) / 2 - B` on the 0-255 scale.
pub fn uicm(r: ArrayView2<f64>, g: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let mut rg = Vec::with_capacity(r.len());
    let mut yb = Vec::with_capacity(r.len());
    for ((rv, gv), bv) in r.iter().zip(g.iter()).zip(b.iter()) {
        rg.push(rv - gv);
        yb.push((rv + gv) / 2.0 - bv);
    }
    let mrg = trimmed_mean(&rg, UICM_TRIM);
    let myb = trimmed_mean(&yb, UICM_TRIM);
    UICM_MEAN_WEIGHT * (mrg * mrg + myb * myb).sqrt()
        + UICM_SPREAD_WEIGHT * (spread(&rg, mrg) + spread(&yb, myb)).sqrt()
}

/// Index into `[0, n)` with half-sample symmetric reflection.
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Sobel gradient magnitude with symmetric border handling.
pub fn sobel_magnitude(x: ArrayView2<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    let at = |y: isize, c: isize| x[[reflect(y, h), reflect(c, w)]];
    Array2::from_shape_fn((h, w), |(y, c)| {
        let (y, c) = (y as isize, c as isize);
        let gy = (at(y + 1, c - 1) + 2.0 * at(y + 1, c) + at(y + 1, c + 1))
            - (at(y - 1, c - 1) + 2.0 * at(y - 1, c) + at(y - 1, c + 1));
        let gx = (at(y - 1, c + 1) + 2.0 * at(y, c + 1) + at(y + 1, c + 1))
            - (at(y - 1, c - 1) + 2.0 * at(y, c - 1) + at(y + 1, c - 1));
        gx.hypot(gy)
    })
}

fn block_extrema(x: &Array2<f64>, block: usize) -> Vec<(f64, f64)> {
    let (h, w) = x.dim();
    let (k1, k2) = (h / block, w / block);
    let mut out = Vec::with_capacity(k1 * k2);
    for by in 0..k1 {
        for bx in 0..k2 {
            let b = x.slice(ndarray::s![
                by * block..(by + 1) * block,
                bx * block..(bx + 1) * block
            ]);
            let (lo, hi) = b
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                });
            out.push((lo, hi));
        }
    }
    out
}

/// `2 / (k1 k2) * sum log(max / min)` over blocks; blocks whose minimum or
/// maximum is zero contribute nothing.
pub fn eme(x: &Array2<f64>, block: usize) -> f64 {
    let ext = block_extrema(x, block);
    let sum: f64 = ext
        .iter()
        .filter(|(lo, hi)| *lo != 0.0 && *hi != 0.0)
        .map(|(lo, hi)| (hi / lo).ln())
        .sum();
    2.0 * sum / ext.len() as f64
}

/// Sharpness: luminance-weighted EME of each channel's Sobel magnitude
/// multiplied by the channel itself.
pub fn uism(channels: [ArrayView2<f64>; 3]) -> f64 {
    channels
        .iter()
        .zip(LUMA_BT601)
        .map(|(c, l)| {
            let edge = sobel_magnitude(c.view()) * c;
            l * eme(&edge, UIQM_BLOCK)
        })
        .sum()
}

/// Contrast: `-1 / (k1 k2) * sum (d / s) log(d / s)` over blocks, with
/// `d = max - min` and `s = max + min`; blocks with `d = 0` or `s = 0` are skipped.
pub fn uiconm(intensity: &Array2<f64>) -> f64 {
    let ext = block_extrema(intensity, UIQM_BLOCK);
    let sum: f64 = ext
        .iter()
        .map(|(lo, hi)| (hi - lo, hi + lo))
        .filter(|(d, s)| *d != 0.0 && *s != 0.0)
        .map(|(d, s)| (d / s) * (d / s).ln())
        .sum();
    -sum / ext.len() as f64
}

/// `(UICM, UISM, UIConM)` of image `n` on the 0-255 scale.
pub fn uiqm_terms(img: &ImageTensor, n: usize) -> [f64; 3] {
    let p = plane_view(img, n).mapv(|v| v * 255.0);
    let r = p.index_axis(ndarray::Axis(0), 0);
    let g = p.index_axis(ndarray::Axis(0), 1);
    let b = p.index_axis(ndarray::Axis(0), 2);
    let intensity = gray_plane(img, n) * 255.0;
    [uicm(r, g, b), uism([r, g, b]), uiconm(&intensity)]
}

/// `0.0282 UICM + 0.2953 UISM + 3.5753 UIConM`, averaged over the batch.
pub fn uiqm(img: &ImageTensor) -> Result<f64> {
    check_rgb(img)?;
    if img.height() < UIQM_BLOCK || img.width() < UIQM_BLOCK {
        return Err(Error::TooSmall(format!(
            "UIQM needs at least {UIQM_BLOCK}x{UIQM_BLOCK} pixels, got {}x{}",
            img.height(),
            img.width()
        )));
    }
    let total: f64 = (0..img.batch())
        .map(|n| {
            let t = uiqm_terms(img, n);
            UIQM_COEFFS.iter().zip(t).map(|(c, v)| c * v).sum::<f64>()
        })
        .sum();
    Ok(total / img.batch() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_gray_scores_zero() {
        let img = ImageTensor::filled(1, 16, 16, 0.4);
        assert_eq!(uciqe(&img).unwrap(), 0.0);
        assert_eq!(uiqm(&img).unwrap(), 0.0);
    }

    #[test]
    fn trimmed_mean_drops_tails() {
        let v: Vec<f64> = (0..10).map(f64::from).collect();
        // ceil(1) = 1 dropped below, floor(1) = 1 dropped above.
        assert_eq!(trimmed_mean(&v, (0.1, 0.1)), 4.5);
        let v: Vec<f64> = (0..15).map(f64::from).collect();
        // ceil(1.5) = 2 below, floor(1.5) = 1 above: mean of 2..=13.
        assert_eq!(trimmed_mean(&v, (0.1, 0.1)), 7.5);
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 4), 0);
        assert_eq!(reflect(-2, 4), 1);
        assert_eq!(reflect(4, 4), 3);
        assert_eq!(reflect(5, 4), 2);
    }

    #[test]
    fn too_small_rejected() {
        assert!(uiqm(&ImageTensor::filled(1, 7, 16, 0.4)).is_err());
    }
}
