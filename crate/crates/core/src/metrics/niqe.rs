//! Natural image quality evaluator: a multivariate Gaussian over
//! generalized-Gaussian statistics of normalized luminance, fitted on pristine
//! images and compared against the same statistics of a test image.

use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use ndarray::{s, Array2, ArrayD, IxDyn};
use serde_json::json;
use statrs::function::gamma::gamma;

use crate::checkpoint::{Container, DType};
use crate::degradation::list_images;
use crate::error::{Error, Result};
use crate::imaging::{gray_plane, load_image, ImageTensor};
use crate::metrics::underwater::reflect;

pub const FEATURES_PER_SCALE: usize = 18;
pub const SCALES: usize = 2;
pub const FEATURE_DIM: usize = FEATURES_PER_SCALE * SCALES;
pub const MIN_PRISTINE_IMAGES: usize = 10;
pub const SHARPNESS_THRESHOLD: f64 = 0.75;
pub const COVARIANCE_RIDGE: f64 = 1e-6;
pub const MSCN_WINDOW: usize = 7;
pub const MSCN_SIGMA: f64 = 7.0 / 6.0;
pub const MSCN_C: f64 = 1.0;
pub const KIND_NIQE: &str = "niqe";

/// Pixel-pair offsets whose products feed the asymmetric fits.
const PAIR_SHIFTS: [(usize, isize); 4] = [(0, 1), (1, 0), (1, 1), (1, -1)];

#[derive(Debug, Clone, PartialEq)]
pub struct NiqeModel {
    pub patch: usize,
    pub mean: Vec<f64>,
    /// Row-major `FEATURE_DIM x FEATURE_DIM`.
    pub cov: Vec<f64>,
    /// Set when the ridge term had to be added to make the covariance definite.
    pub regularized: bool,
}

impl NiqeModel {
    pub fn feature_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let d = self.feature_dim();
        let mut c = Container::new(json!({
            "kind": KIND_NIQE,
            "patch": self.patch,
            "feature_dim": d,
            "regularized": self.regularized,
        }));
        c.insert(
            "mean",
            DType::F64,
            ArrayD::from_shape_vec(IxDyn(&[d]), self.mean.clone()).expect("length d"),
        );
        c.insert(
            "cov",
            DType::F64,
            ArrayD::from_shape_vec(IxDyn(&[d, d]), self.cov.clone()).expect("d x d"),
        );
        c.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        if c.kind() != Some(KIND_NIQE) {
            return Err(Error::CorruptCheckpoint(format!(
                "expected a NIQE model, found {:?}",
                c.kind()
            )));
        }
        let patch = c
            .metadata
            .get("patch")
            .and_then(|v| v.as_u64())
            .unwrap_or(0) as usize;
        let regularized = c
            .metadata
            .get("regularized")
            .and_then(|v| v.as_bool())
            .unwrap_or(false);
        let mean = c.get("mean")?.iter().copied().collect::<Vec<_>>();
        let cov = c.get("cov")?.iter().copied().collect::<Vec<_>>();
        if mean.len() != FEATURE_DIM || cov.len() != FEATURE_DIM * FEATURE_DIM || patch == 0 {
            return Err(Error::CorruptCheckpoint(
                "NIQE model has inconsistent dimensions".into(),
            ));
        }
        Ok(NiqeModel {
            patch,
            mean,
            cov,
            regularized,
        })
    }
}

/// Separable correlation with symmetric border handling; output size equals input.
fn filter_same(x: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let r = (k.len() / 2) as isize;
    let rows = Array2::from_shape_fn((h, w), |(y, c)| -> f64 {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * x[[y, reflect(c as isize + i as isize - r, w)]])
            .sum()
    });
    Array2::from_shape_fn((h, w), |(y, c)| -> f64 {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * rows[[reflect(y as isize + i as isize - r, h), c]])
            .sum()
    })
}

/// Mean-subtracted contrast-normalized coefficients and the local deviation map.
pub fn mscn(gray: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let k = super::reference::gaussian_kernel(MSCN_WINDOW, MSCN_SIGMA);
    let mu = filter_same(gray, &k);
    let mu2 = filter_same(&(gray * gray), &k);
    let mut sigma = Array2::zeros(gray.raw_dim());
    ndarray::Zip::from(&mut sigma)
        .and(&mu)
        .and(&mu2)
        .for_each(|s, &m, &m2| *s = (m2 - m * m).abs().sqrt());
    let mut out = gray - &mu;
    out.zip_mut_with(&sigma, |v, s| *v /= s + MSCN_C);
    (out, sigma)
}

fn alpha_grid() -> &'static (Vec<f64>, Vec<f64>) {
    static GRID: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    GRID.get_or_init(|| {
        let alphas: Vec<f64> = (0..9800).map(|i| 0.2 + 0.001 * i as f64).collect();
        let ratios = alphas
            .iter()
            .map(|&a| gamma(2.0 / a).powi(2) / (gamma(1.0 / a) * gamma(3.0 / a)))
            .collect();
        (alphas, ratios)
    })
}

/// Asymmetric generalized Gaussian fit by moment matching over a shape grid.
/// Returns `(alpha, mean, beta_left, beta_right)`.
pub fn aggd_fit(values: &[f64]) -> [f64; 4] {
    let (mut ls, mut ln, mut rs, mut rn) = (0.0, 0usize, 0.0, 0usize);
    let (mut abs_sum, mut sq_sum) = (0.0, 0.0);
    for &v in values {
        if v < 0.0 {
            ls += v * v;
            ln += 1;
        } else {
            rs += v * v;
            rn += 1;
        }
        abs_sum += v.abs();
        sq_sum += v * v;
    }
    let n = values.len() as f64;
    let left = if ln > 0 { (ls / ln as f64).sqrt() } else { 0.0 };
    let right = if rn > 0 { (rs / rn as f64).sqrt() } else { 0.0 };
    let gamma_hat = if right != 0.0 {
        left / right
    } else {
        f64::INFINITY
    };
    let r_hat = if sq_sum != 0.0 {
        (abs_sum / n).powi(2) / (sq_sum / n)
    } else {
        f64::INFINITY
    };
    let r_norm =
        r_hat * ((gamma_hat.powi(3) + 1.0) * (gamma_hat + 1.0)) / (gamma_hat.powi(2) + 1.0).powi(2);
    let (alphas, ratios) = alpha_grid();
    let pos = if r_norm.is_finite() {
        ratios
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |(bi, bd), (i, r)| {
                let d = (r - r_norm).powi(2);
                if d < bd {
                    (i, d)
                } else {
                    (bi, bd)
                }
            })
            .0
    } else {
        0
    };
    let alpha = alphas[pos];
    let (g1, g2, g3) = (gamma(1.0 / alpha), gamma(2.0 / alpha), gamma(3.0 / alpha));
    let ratio = (g1 / g3).sqrt();
    let bl = ratio * left;
    let br = ratio * right;
    [alpha, (br - bl) * g2 / g1, bl, br]
}

/// The 18 statistics of one MSCN patch.
pub fn patch_features(p: &Array2<f64>) -> Vec<f64> {
    let (h, w) = p.dim();
    let mut f = Vec::with_capacity(FEATURES_PER_SCALE);
    let all: Vec<f64> = p.iter().copied().collect();
    let [alpha, _, bl, br] = aggd_fit(&all);
    f.extend([alpha, (bl + br) / 2.0]);
    for (dy, dx) in PAIR_SHIFTS {
        let mut prod = Vec::with_capacity(h * w);
        for y in 0..h.saturating_sub(dy) {
            for x in 0..w {
                let x2 = x as isize + dx;
                if x2 < 0 || x2 >= w as isize {
                    continue;
                }
                prod.push(p[[y, x]] * p[[y + dy, x2 as usize]]);
            }
        }
        f.extend(aggd_fit(&prod));
    }
    f
}

/// 2x2 box average, dropping an odd last row/column.
pub fn downsample(x: &Array2<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    Array2::from_shape_fn((h / 2, w / 2), |(y, c)| {
        (x[[2 * y, 2 * c]]
            + x[[2 * y + 1, 2 * c]]
            + x[[2 * y, 2 * c + 1]]
            + x[[2 * y + 1, 2 * c + 1]])
            / 4.0
    })
}

/// Per-patch 36-dimensional features and sharpness of a 0-255 gray plane.
pub fn image_features(gray: &Array2<f64>, patch: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if patch < 4 || patch % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "NIQE patch size must be even and >= 4, got {patch}"
        )));
    }
    let (h, w) = gray.dim();
    let (py, px) = (h / patch, w / patch);
    if py * px < 2 {
        return Err(Error::TooSmall(format!(
            "NIQE needs at least two {patch}x{patch} patches, image is {h}x{w}"
        )));
    }
    let (m1, sigma) = mscn(gray);
    let (m2, _) = mscn(&downsample(gray));
    let half = patch / 2;
    let mut feats = Vec::with_capacity(py * px);
    let mut sharp = Vec::with_capacity(py * px);
    for by in 0..py {
        for bx in 0..px {
            let p1 = m1
                .slice(s![
                    by * patch..(by + 1) * patch,
                    bx * patch..(bx + 1) * patch
                ])
                .to_owned();
            let p2 = m2
                .slice(s![by * half..(by + 1) * half, bx * half..(bx + 1) * half])
                .to_owned();
            let mut f = patch_features(&p1);
            f.extend(patch_features(&p2));
            feats.push(f);
            sharp.push(
                sigma
                    .slice(s![
                        by * patch..(by + 1) * patch,
                        bx * patch..(bx + 1) * patch
                    ])
                    .mean()
                    .unwrap_or(0.0),
            );
        }
    }
    Ok((feats, sharp))
}

fn gray255(img: &ImageTensor, n: usize) -> Array2<f64> {
    gray_plane(img, n) * 255.0
}

fn mean_and_cov(rows: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = rows[0].len();
    let n = rows.len();
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mu = DVector::from_fn(d, |j, _| x.column(j).mean());
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
    let mut cov = centered.transpose() * &centered / (n.max(2) - 1) as f64;
    cov = (&cov + cov.transpose()) * 0.5;
    (mu, cov)
}

/// Fits the pristine model from in-memory images.
pub fn niqe_fit_images(images: &[ImageTensor], patch: usize) -> Result<NiqeModel> {
    if images.len() < MIN_PRISTINE_IMAGES {
        return Err(Error::Dataset(format!(
            "NIQE fitting needs at least {MIN_PRISTINE_IMAGES} pristine images, got {}",
            images.len()
        )));
    }
    let mut rows = Vec::new();
    for img in images {
        for n in 0..img.batch() {
            let (feats, sharp) = image_features(&gray255(img, n), patch)?;
            let max = sharp.iter().copied().fold(0.0, f64::max);
            rows.extend(
                feats
                    .into_iter()
                    .zip(&sharp)
                    .filter(|(_, s)| **s > SHARPNESS_THRESHOLD * max)
                    .map(|(f, _)| f),
            );
        }
    }
    if rows.len() < 2 {
        return Err(Error::Dataset(
            "too few sharp patches in the pristine set".into(),
        ));
    }
    let (mu, mut cov) = mean_and_cov(&rows);
    let eig = cov.clone().symmetric_eigen();
    let max_eig = eig.eigenvalues.max().max(1.0);
    let regularized = eig.eigenvalues.min() <= 1e-12 * max_eig;
    if regularized {
        for i in 0..cov.nrows() {
            cov[(i, i)] += COVARIANCE_RIDGE;
        }
    }
    Ok(NiqeModel {
        patch,
        mean: mu.iter().copied().collect(),
        cov: cov.transpose().iter().copied().collect(),
        regularized,
    })
}

/// Fits the pristine model from every image in `dir`.
pub fn niqe_fit(dir: &Path, patch: usize) -> Result<NiqeModel> {
    let files = list_images(dir)?;
    if files.len() < MIN_PRISTINE_IMAGES {
        return Err(Error::Dataset(format!(
            "NIQE fitting needs at least {MIN_PRISTINE_IMAGES} pristine images, found {} in {}",
            files.len(),
            dir.display()
        )));
    }
    let images = files.iter().map(load_image).collect::<Result<Vec<_>>>()?;
    niqe_fit_images(&images, patch)
}

/// `sqrt(dmu^T pinv((S1 + S2) / 2) dmu)` between the model and the image's
/// patch statistics; averaged over the batch.
pub fn niqe_score(img: &ImageTensor, model: &NiqeModel) -> Result<f64> {
    let d = model.feature_dim();
    let s1 = DMatrix::from_row_slice(d, d, &model.cov);
    let mu1 = DVector::from_column_slice(&model.mean);
    let mut total = 0.0;
    for n in 0..img.batch() {
        let (feats, _) = image_features(&gray255(img, n), model.patch)?;
        let (mu2, s2) = mean_and_cov(&feats);
        let pooled = (&s1 + &s2) * 0.5;
        let pinv = pooled
            .pseudo_inverse(1e-12)
            .map_err(|e| Error::NonFinite(format!("NIQE pseudo-inverse failed: {e}")))?;
        let dm = &mu1 - &mu2;
        let q = (dm.transpose() * pinv * &dm)[(0, 0)];
        if !q.is_finite() {
            return Err(Error::NonFinite("NIQE distance is not finite".into()));
        }
        total += q.max(0.0).sqrt();
    }
    Ok(total / img.batch() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggd_of_symmetric_gaussian_like_data() {
        let v: Vec<f64> = (0..2000).map(|i| ((i as f64) * 0.7).sin()).collect();
        let [alpha, mean, bl, br] = aggd_fit(&v);
        assert!(alpha > 0.2 && alpha < 10.0);
        assert!(mean.abs() < 0.05);
        assert!((bl - br).abs() / br < 0.05);
    }

    #[test]
    fn feature_dimension() {
        let g = Array2::from_shape_fn((32, 32), |(y, x)| ((x * 7 + y * 13) % 17) as f64 * 10.0);
        let (f, s) = image_features(&g, 16).unwrap();
        assert_eq!(f.len(), 4);
        assert_eq!(s.len(), 4);
        assert!(f.iter().all(|r| r.len() == FEATURE_DIM));
        assert!(image_features(&g, 32).is_err());
    }

    #[test]
    fn constant_patch_is_finite() {
        let g = Array2::from_elem((16, 16), 100.0);
        let (f, _) = image_features(&g, 8).unwrap();
        assert!(f.iter().flatten().all(|v| v.is_finite()));
    }
}
