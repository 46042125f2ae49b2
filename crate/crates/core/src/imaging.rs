//! Image I/O, color-space conversions and paired geometric augmentation.
//!
//! Every image crossing a pipeline boundary is an [`ImageTensor`]: a
//! `(N, 3, H, W)` array of finite intensities in `[0, 1]`.

use std::path::Path;
use std::str::FromStr;

use image::{DynamicImage, ImageBuffer, Rgb};
use ndarray::{s, Array3, Array4, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Batch of RGB images, shape `(N, 3, H, W)`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor(Array4<f64>);

impl ImageTensor {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        if data.shape()[1] != 3 {
            return Err(Error::Shape(format!(
                "expected 3 channels, got {}",
                data.shape()[1]
            )));
        }
        if let Some(v) = data
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::InvalidArgument(format!(
                "image value {v} outside [0, 1]"
            )));
        }
        Ok(ImageTensor(data))
    }

    /// Clamps `data` into `[0, 1]`; non-finite values are rejected.
    pub fn from_clamped(mut data: Array4<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image contains NaN or inf".into()));
        }
        data.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Self::new(data)
    }

    pub fn filled(n: usize, h: usize, w: usize, value: f64) -> Self {
        ImageTensor(Array4::from_elem((n, 3, h, w), value.clamp(0.0, 1.0)))
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array4<f64> {
        self.0
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[3]
    }

    /// Single image `n` as a batch of one.
    pub fn item(&self, n: usize) -> ImageTensor {
        ImageTensor(self.0.slice(s![n..n + 1, .., .., ..]).to_owned())
    }

    pub fn stack(images: &[ImageTensor]) -> Result<ImageTensor> {
        let views: Vec<_> = images.iter().map(|im| im.0.view()).collect();
        let data = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::Shape(format!("cannot stack images: {e}")))?;
        Ok(ImageTensor(data))
    }
}

/// Loads an 8- or 16-bit RGB PNG (or an RGB JPEG) into a `(1, 3, H, W)` tensor.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file does not exist"),
        ));
    }
    let reader = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let decoded = reader.decode().map_err(|e| match e {
        image::ImageError::Unsupported(_) | image::ImageError::Decoding(_) => {
            Error::UnsupportedImage {
                path: path.to_path_buf(),
                reason: e.to_string(),
            }
        }
        other => Error::Codec {
            path: path.to_path_buf(),
            source: other,
        },
    })?;
    match decoded {
        DynamicImage::ImageRgb8(buf) => {
            let (w, h) = buf.dimensions();
            Ok(ImageTensor(raster_to_array(
                buf.as_raw(),
                h as usize,
                w as usize,
                255.0,
            )))
        }
        DynamicImage::ImageRgb16(buf) => {
            let (w, h) = buf.dimensions();
            Ok(ImageTensor(raster_to_array(
                buf.as_raw(),
                h as usize,
                w as usize,
                65535.0,
            )))
        }
        other => Err(Error::UnsupportedImage {
            path: path.to_path_buf(),
            reason: format!(
                "expected an RGB image, got {} channel(s) ({:?})",
                other.color().channel_count(),
                other.color()
            ),
        }),
    }
}

fn raster_to_array<T: Copy + Into<f64>>(raw: &[T], h: usize, w: usize, scale: f64) -> Array4<f64> {
    let mut out = Array4::zeros((1, 3, h, w));
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * 3;
            for c in 0..3 {
                out[[0, c, y, x]] = raw[base + c].into() / scale;
            }
        }
    }
    out
}

/// Writes a single image as an 8-bit RGB PNG. Values are clamped to `[0, 1]`
/// and rounded to the nearest 8-bit level.
pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if img.batch() != 1 {
        return Err(Error::Shape(format!(
            "save_image expects N=1, got N={}",
            img.batch()
        )));
    }
    let (h, w) = (img.height(), img.width());
    let data = img.data();
    let mut buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        for c in 0..3 {
            let v = data[[0, c, y as usize, x as usize]].clamp(0.0, 1.0);
            px[c] = (v * 255.0).round() as u8;
        }
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Codec {
                path: path.to_path_buf(),
                source: other,
            },
        })
}

/// Target color space for [`convert_colorspace`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorSpace {
    /// CIELAB, D65 white, sRGB linearization. L* in [0, 100].
    Lab,
    /// Hue in degrees `[0, 360)`, saturation and value in `[0, 1]`.
    Hsv,
    /// Full-range ITU-R BT.601, chroma offset to 0.5.
    YCbCr,
    /// BT.601 luma, single channel.
    Gray,
}

impl FromStr for ColorSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lab" => Ok(ColorSpace::Lab),
            "hsv" => Ok(ColorSpace::Hsv),
            "ycbcr" => Ok(ColorSpace::YCbCr),
            "gray" | "grey" => Ok(ColorSpace::Gray),
            other => Err(Error::InvalidArgument(format!(
                "unknown color space `{other}`"
            ))),
        }
    }
}

/// sRGB (linear) to XYZ, D65.
pub const XYZ_FROM_RGB: [[f64; 3]; 3] = [
    [0.412453, 0.357580, 0.180423],
    [0.212671, 0.715160, 0.072169],
    [0.019334, 0.119193, 0.950227],
];
pub const D65_WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];
pub const LUMA_BT601: [f64; 3] = [0.299, 0.587, 0.114];

fn srgb_to_linear(c: f64) -> f64 {
    if c > 0.04045 {
        ((c + 0.055) / 1.055).powf(2.4)
    } else {
        c / 12.92
    }
}

fn lab_f(t: f64) -> f64 {
    if t > 0.008856 {
        t.cbrt()
    } else {
        7.787 * t + 16.0 / 116.0
    }
}

/// CIELAB of one sRGB pixel. Achromatic pixels (r = g = b) map to a* = b* = 0 exactly.
pub fn rgb_to_lab(r: f64, g: f64, b: f64) -> [f64; 3] {
    let lin = [srgb_to_linear(r), srgb_to_linear(g), srgb_to_linear(b)];
    let mut f = [0.0; 3];
    for (i, row) in XYZ_FROM_RGB.iter().enumerate() {
        let v = row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2];
        f[i] = lab_f(v / D65_WHITE[i]);
    }
    if r == g && g == b {
        f[0] = f[1];
        f[2] = f[1];
    }
    [
        116.0 * f[1] - 16.0,
        500.0 * (f[0] - f[1]),
        200.0 * (f[1] - f[2]),
    ]
}

pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    [h, s, max]
}

pub fn rgb_to_ycbcr(r: f64, g: f64, b: f64) -> [f64; 3] {
    [
        LUMA_BT601[0] * r + LUMA_BT601[1] * g + LUMA_BT601[2] * b,
        0.5 - 0.168736 * r - 0.331264 * g + 0.5 * b,
        0.5 + 0.5 * r - 0.418688 * g - 0.081312 * b,
    ]
}

pub fn luma(r: f64, g: f64, b: f64) -> f64 {
    LUMA_BT601[0] * r + LUMA_BT601[1] * g + LUMA_BT601[2] * b
}

/// Converts every pixel to `target`. Output has 3 channels, or 1 for [`ColorSpace::Gray`].
pub fn convert_colorspace(img: &ImageTensor, target: ColorSpace) -> Array4<f64> {
    let d = img.data();
    let (n, _, h, w) = d.dim();
    let out_c = if target == ColorSpace::Gray { 1 } else { 3 };
    let mut out = Array4::zeros((n, out_c, h, w));
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                let (r, g, b) = (d[[i, 0, y, x]], d[[i, 1, y, x]], d[[i, 2, y, x]]);
                let px = match target {
                    ColorSpace::Lab => rgb_to_lab(r, g, b),
                    ColorSpace::Hsv => rgb_to_hsv(r, g, b),
                    ColorSpace::YCbCr => rgb_to_ycbcr(r, g, b),
                    ColorSpace::Gray => [luma(r, g, b), 0.0, 0.0],
                };
                for c in 0..out_c {
                    out[[i, c, y, x]] = px[c];
                }
            }
        }
    }
    out
}

/// Grayscale plane of image `n` (BT.601 luma).
pub fn gray_plane(img: &ImageTensor, n: usize) -> ndarray::Array2<f64> {
    let d = img.data();
    let (_, _, h, w) = d.dim();
    ndarray::Array2::from_shape_fn((h, w), |(y, x)| {
        luma(d[[n, 0, y, x]], d[[n, 1, y, x]], d[[n, 2, y, x]])
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    /// Probability of a horizontal flip.
    pub horizontal_flip: f64,
    pub crop_size: usize,
    /// Allowed rotations in degrees, each one of 0, 90, 180, 270.
    pub rotation_set: Vec<u16>,
    pub seed: u64,
}

impl AugmentSpec {
    /// No flips, no rotation, crop of the given size.
    pub fn identity(crop_size: usize, seed: u64) -> Self {
        AugmentSpec {
            horizontal_flip: 0.0,
            crop_size,
            rotation_set: vec![0],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rotation_set.is_empty() {
            return Err(Error::Config("rotation_set must not be empty".into()));
        }
        if let Some(r) = self
            .rotation_set
            .iter()
            .find(|r| ![0, 90, 180, 270].contains(*r))
        {
            return Err(Error::Config(format!(
                "rotation {r} is not a multiple of 90 in [0, 270]"
            )));
        }
        if !(0.0..=1.0).contains(&self.horizontal_flip) {
            return Err(Error::Config(
                "horizontal_flip must be a probability".into(),
            ));
        }
        if self.crop_size == 0 {
            return Err(Error::Config("crop_size must be positive".into()));
        }
        Ok(())
    }
}

/// One concrete geometric transform, applied as crop → rotate → flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transform {
    pub top: usize,
    pub left: usize,
    pub size: usize,
    /// Counter-clockwise quarter turns.
    pub quarter_turns: u8,
    pub flip: bool,
}

impl Transform {
    pub fn sample(spec: &AugmentSpec, h: usize, w: usize, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        if spec.crop_size > h.min(w) {
            return Err(Error::InvalidArgument(format!(
                "crop size {} exceeds image size {h}x{w}",
                spec.crop_size
            )));
        }
        let top = rng.gen_range(0..=h - spec.crop_size);
        let left = rng.gen_range(0..=w - spec.crop_size);
        let rot = spec.rotation_set[rng.gen_range(0..spec.rotation_set.len())];
        let flip = rng.gen::<f64>() < spec.horizontal_flip;
        Ok(Transform {
            top,
            left,
            size: spec.crop_size,
            quarter_turns: (rot / 90) as u8,
            flip,
        })
    }

    pub fn apply(&self, img: &ImageTensor) -> ImageTensor {
        let d = img.data();
        let n = d.shape()[0];
        let k = self.size;
        let mut out = Array4::zeros((n, 3, k, k));
        for i in 0..n {
            for c in 0..3 {
                let crop = d.slice(s![i, c, self.top..self.top + k, self.left..self.left + k]);
                for y in 0..k {
                    for x in 0..k {
                        // Output (y, x) after the flip reads (y, xf) of the rotated crop.
                        let xf = if self.flip { k - 1 - x } else { x };
                        let (sy, sx) = match self.quarter_turns % 4 {
                            0 => (y, xf),
                            1 => (xf, k - 1 - y),
                            2 => (k - 1 - y, k - 1 - xf),
                            _ => (k - 1 - xf, y),
                        };
                        out[[i, c, y, x]] = crop[[sy, sx]];
                    }
                }
            }
        }
        ImageTensor(out)
    }
}

/// Applies one seeded geometric transform identically to a raw/reference pair.
pub fn augment_pair(
    raw: &ImageTensor,
    reference: &ImageTensor,
    spec: &AugmentSpec,
) -> Result<(ImageTensor, ImageTensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    augment_pair_with(raw, reference, spec, &mut rng)
}

pub fn augment_pair_with(
    raw: &ImageTensor,
    reference: &ImageTensor,
    spec: &AugmentSpec,
    rng: &mut impl Rng,
) -> Result<(ImageTensor, ImageTensor)> {
    if raw.data().shape() != reference.data().shape() {
        return Err(Error::Shape(format!(
            "raw {:?} and reference {:?} differ",
            raw.data().shape(),
            reference.data().shape()
        )));
    }
    let t = Transform::sample(spec, raw.height(), raw.width(), rng)?;
    Ok((t.apply(raw), t.apply(reference)))
}

/// Channel-first view of one image as `(3, H, W)`.
pub fn plane_view(img: &ImageTensor, n: usize) -> ArrayView3<'_, f64> {
    img.data().index_axis(Axis(0), n)
}

pub fn from_planes(planes: Array3<f64>) -> Result<ImageTensor> {
    ImageTensor::new(planes.insert_axis(Axis(0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> ImageTensor {
        let n = (3 * h * w) as f64;
        ImageTensor::new(Array4::from_shape_fn((1, 3, h, w), |(_, c, y, x)| {
            ((c * h * w + y * w + x) as f64) / n
        }))
        .unwrap()
    }

    #[test]
    fn png_round_trip_levels() {
        let dir = tempfile::tempdir().unwrap();
        for (value, expect) in [
            (0.0, 0.0),
            (1.0, 1.0),
            (0.5, (0.5f64 * 255.0).round() / 255.0),
        ] {
            let p = dir.path().join("x.png");
            save_image(&ImageTensor::filled(1, 2, 2, value), &p).unwrap();
            let back = load_image(&p).unwrap();
            assert_eq!(back.data().dim(), (1, 3, 2, 2));
            assert!(back.data().iter().all(|v| (v - expect).abs() < 1e-12));
            assert!((expect - value).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn load_scales_8bit_by_255() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.png");
        let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_pixel(1, 1, Rgb([128, 0, 255]));
        buf.save(&p).unwrap();
        let t = load_image(&p).unwrap();
        assert_eq!(t.data()[[0, 0, 0, 0]], 128.0 / 255.0);
        assert!((t.data()[[0, 0, 0, 0]] - 0.50196).abs() < 1e-5);
        assert_eq!(t.data()[[0, 2, 0, 0]], 1.0);
    }

    #[test]
    fn load_16bit_png() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p16.png");
        let buf: ImageBuffer<Rgb<u16>, Vec<u16>> =
            ImageBuffer::from_pixel(2, 1, Rgb([65535, 0, 32768]));
        buf.save(&p).unwrap();
        let t = load_image(&p).unwrap();
        assert_eq!(t.data()[[0, 0, 0, 1]], 1.0);
        assert_eq!(t.data()[[0, 2, 0, 0]], 32768.0 / 65535.0);
    }

    #[test]
    fn load_rejects_gray_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        image::GrayImage::from_pixel(2, 2, image::Luma([7]))
            .save(&p)
            .unwrap();
        assert!(matches!(
            load_image(&p),
            Err(Error::UnsupportedImage { .. })
        ));
        assert!(matches!(
            load_image(dir.path().join("nope.png")),
            Err(Error::Io { .. })
        ));
        let junk = dir.path().join("junk.png");
        std::fs::write(&junk, b"not an image").unwrap();
        assert!(load_image(&junk).is_err());
    }

    #[test]
    fn achromatic_and_primaries() {
        let lab = rgb_to_lab(0.3, 0.3, 0.3);
        assert_eq!((lab[1], lab[2]), (0.0, 0.0));
        assert_eq!(rgb_to_hsv(0.7, 0.7, 0.7)[1], 0.0);
        assert_eq!(rgb_to_hsv(1.0, 0.0, 0.0), [0.0, 1.0, 1.0]);
        assert_eq!(rgb_to_hsv(0.0, 1.0, 0.0)[0], 120.0);
        assert_eq!(rgb_to_hsv(0.0, 0.0, 1.0)[0], 240.0);
        assert!((luma(0.42, 0.42, 0.42) - 0.42).abs() < 1e-12);
        let ycc = rgb_to_ycbcr(0.5, 0.5, 0.5);
        assert!((ycc[1] - 0.5).abs() < 1e-12 && (ycc[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn lab_matches_reference_fixture() {
        // skimage.color.rgb2lab([[[0.2, 0.4, 0.6]]])
        let lab = rgb_to_lab(0.2, 0.4, 0.6);
        let expect = [
            42.008000589382185,
            -0.15404119847206577,
            -32.842897418997154,
        ];
        for (a, b) in lab.iter().zip(expect) {
            assert!((a - b).abs() < 1e-8, "{lab:?}");
        }
    }

    #[test]
    fn unknown_colorspace_rejected() {
        assert!("xyz".parse::<ColorSpace>().is_err());
        assert_eq!("YCbCr".parse::<ColorSpace>().unwrap(), ColorSpace::YCbCr);
    }

    #[test]
    fn identity_augmentation() {
        let img = ramp(5, 5);
        let (a, b) = augment_pair(&img, &img, &AugmentSpec::identity(5, 3)).unwrap();
        assert_eq!(a, img);
        assert_eq!(b, img);
    }

    #[test]
    fn rotate_180_twice_is_identity() {
        let img = ramp(6, 6);
        let spec = AugmentSpec {
            rotation_set: vec![180],
            ..AugmentSpec::identity(6, 0)
        };
        let (once, _) = augment_pair(&img, &img, &spec).unwrap();
        assert_ne!(once, img);
        let (twice, _) = augment_pair(&once, &once, &spec).unwrap();
        assert_eq!(twice, img);
    }

    #[test]
    fn quarter_turn_is_counter_clockwise() {
        // 2x2 planes: [[a, b], [c, d]] rotated CCW becomes [[b, d], [a, c]].
        let img = ramp(2, 2);
        let t = Transform {
            top: 0,
            left: 0,
            size: 2,
            quarter_turns: 1,
            flip: false,
        };
        let r = t.apply(&img);
        let d = img.data();
        assert_eq!(r.data()[[0, 0, 0, 0]], d[[0, 0, 0, 1]]);
        assert_eq!(r.data()[[0, 0, 0, 1]], d[[0, 0, 1, 1]]);
        assert_eq!(r.data()[[0, 0, 1, 0]], d[[0, 0, 0, 0]]);
    }

    #[test]
    fn same_seed_same_pair_and_shared_transform() {
        let raw = ramp(9, 11);
        let reference = ImageTensor::new(raw.data().mapv(|v| 1.0 - v)).unwrap();
        let spec = AugmentSpec {
            horizontal_flip: 0.5,
            crop_size: 6,
            rotation_set: vec![0, 90, 180, 270],
            seed: 77,
        };
        let first = augment_pair(&raw, &reference, &spec).unwrap();
        let second = augment_pair(&raw, &reference, &spec).unwrap();
        assert_eq!(first, second);
        assert_eq!(first.0.height(), 6);
        // The reference went through the same transform.
        assert_eq!(first.1.data(), &first.0.data().mapv(|v| 1.0 - v));
    }

    #[test]
    fn crop_larger_than_image_fails() {
        let img = ramp(4, 8);
        assert!(augment_pair(&img, &img, &AugmentSpec::identity(5, 0)).is_err());
        let other = ramp(4, 4);
        assert!(augment_pair(&img, &other, &AugmentSpec::identity(4, 0)).is_err());
        let bad = AugmentSpec {
            rotation_set: vec![],
            ..AugmentSpec::identity(2, 0)
        };
        assert!(augment_pair(&img, &img, &bad).is_err());
    }

    #[test]
    fn image_tensor_validates_range() {
        assert!(ImageTensor::new(Array4::from_elem((1, 3, 1, 1), 1.5)).is_err());
        assert!(ImageTensor::new(Array4::from_elem((1, 2, 1, 1), 0.5)).is_err());
        assert!(ImageTensor::from_clamped(Array4::from_elem((1, 3, 1, 1), f64::NAN)).is_err());
        let c = ImageTensor::from_clamped(Array4::from_elem((1, 3, 1, 1), 1.5)).unwrap();
        assert_eq!(c.data()[[0, 0, 0, 0]], 1.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn flips_and_rotations_preserve_pixel_multiset(seed in 0u64..500, h in 3usize..9) {
                let img = ramp(h, h);
                let spec = AugmentSpec {
                    horizontal_flip: 0.5,
                    crop_size: h,
                    rotation_set: vec![0, 90, 180, 270],
                    seed,
                };
                let (out, _) = augment_pair(&img, &img, &spec).unwrap();
                let mut a: Vec<f64> = img.data().iter().copied().collect();
                let mut b: Vec<f64> = out.data().iter().copied().collect();
                a.sort_by(f64::total_cmp);
                b.sort_by(f64::total_cmp);
                prop_assert_eq!(a, b);
            }

            #[test]
            fn conversions_are_finite(r in 0.0f64..=1.0, g in 0.0f64..=1.0, b in 0.0f64..=1.0) {
                for v in rgb_to_lab(r, g, b).into_iter()
                    .chain(rgb_to_hsv(r, g, b))
                    .chain(rgb_to_ycbcr(r, g, b)) {
                    prop_assert!(v.is_finite());
                }
                let hsv = rgb_to_hsv(r, g, b);
                prop_assert!((0.0..360.0).contains(&hsv[0]));
            }
        }
    }
}
