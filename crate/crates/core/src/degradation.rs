//! Simplified underwater image formation without forward scattering:
//!
//! ```text
//! I_c(x) = J_c(x) t_c(x) + B_c (1 - t_c(x)),    t_c(x) = exp(-beta_c d(x))
//! ```
//!
//! Used to synthesize degraded/clean training pairs from clean images.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{load_image, save_image, ImageTensor};

/// How the per-pixel camera distance is produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DepthSpec {
    Constant {
        meters: f64,
    },
    /// Linear ramp from `min` to `max` meters along rows (`axis = 0`) or columns (`axis = 1`).
    Ramp {
        min: f64,
        max: f64,
        axis: u8,
    },
    /// Row-major `H x W` map in meters.
    Map {
        height: usize,
        width: usize,
        values: Vec<f64>,
    },
}

impl DepthSpec {
    pub fn render(&self, h: usize, w: usize) -> Result<Array2<f64>> {
        let depth = match self {
            DepthSpec::Constant { meters } => Array2::from_elem((h, w), *meters),
            DepthSpec::Ramp { min, max, axis } => {
                let span = if *axis == 0 { h } else { w };
                let step = if span > 1 {
                    (max - min) / (span - 1) as f64
                } else {
                    0.0
                };
                Array2::from_shape_fn((h, w), |(y, x)| {
                    let i = if *axis == 0 { y } else { x };
                    min + step * i as f64
                })
            }
            DepthSpec::Map {
                height,
                width,
                values,
            } => {
                if (*height, *width) != (h, w) || values.len() != h * w {
                    return Err(Error::Shape(format!(
                        "depth map {height}x{width} does not match image {h}x{w}"
                    )));
                }
                Array2::from_shape_vec((h, w), values.clone())
                    .map_err(|e| Error::Shape(e.to_string()))?
            }
        };
        Ok(depth)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationParams {
    /// Per-channel attenuation coefficients (R, G, B), 1/m.
    pub beta: [f64; 3],
    /// Background light (R, G, B) in `[0, 1]`.
    pub background: [f64; 3],
    pub depth: DepthSpec,
}

impl DegradationParams {
    pub fn validate(&self) -> Result<()> {
        if self.beta.iter().any(|b| !(*b >= 0.0) || !b.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "attenuation must be non-negative, got {:?}",
                self.beta
            )));
        }
        if self.background.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(Error::InvalidArgument(format!(
                "background light must lie in [0, 1], got {:?}",
                self.background
            )));
        }
        Ok(())
    }

    /// Degrades one clean image (N = 1) with these parameters.
    pub fn apply(&self, clean: &ImageTensor) -> Result<ImageTensor> {
        self.validate()?;
        let depth = self.depth.render(clean.height(), clean.width())?;
        let t = transmission_map(&depth, self.beta)?;
        degrade(clean, &t, self.background)
    }
}

/// `t_c(x) = exp(-beta_c d(x))`, shape `(3, H, W)`.
pub fn transmission_map(depth: &Array2<f64>, beta: [f64; 3]) -> Result<Array3<f64>> {
    if let Some(b) = beta.iter().find(|b| !(**b >= 0.0)) {
        return Err(Error::InvalidArgument(format!("negative attenuation {b}")));
    }
    if let Some(d) = depth.iter().find(|d| !(**d >= 0.0)) {
        return Err(Error::InvalidArgument(format!("negative depth {d}")));
    }
    let (h, w) = depth.dim();
    Ok(Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        (-beta[c] * depth[[y, x]]).exp()
    }))
}

/// Per-pixel image formation: `I = J t + B (1 - t)`, applied to every image in the batch.
pub fn degrade(clean: &ImageTensor, t: &Array3<f64>, background: [f64; 3]) -> Result<ImageTensor> {
    let d = clean.data();
    let (n, c, h, w) = d.dim();
    if t.dim() != (c, h, w) {
        return Err(Error::Shape(format!(
            "transmission {:?} does not match image {:?}",
            t.dim(),
            (c, h, w)
        )));
    }
    let out = Array4::from_shape_fn((n, c, h, w), |(i, ch, y, x)| {
        let tv = t[[ch, y, x]];
        d[[i, ch, y, x]] * tv + background[ch] * (1.0 - tv)
    });
    ImageTensor::from_clamped(out)
}

/// Algebraic inverse of [`degrade`]: `J = (I - B (1 - t)) / t`. Pixels with
/// `t <= min_t` are returned as the background value.
pub fn restore(
    degraded: &ImageTensor,
    t: &Array3<f64>,
    background: [f64; 3],
    min_t: f64,
) -> Array4<f64> {
    let d = degraded.data();
    let (n, c, h, w) = d.dim();
    Array4::from_shape_fn((n, c, h, w), |(i, ch, y, x)| {
        let tv = t[[ch, y, x]];
        if tv > min_t {
            (d[[i, ch, y, x]] - background[ch] * (1.0 - tv)) / tv
        } else {
            background[ch]
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Range { min, max }
    }

    pub const fn point(v: f64) -> Self {
        Range { min: v, max: v }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.max > self.min {
            rng.gen_range(self.min..=self.max)
        } else {
            self.min
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRanges {
    pub beta: [Range; 3],
    pub background: [Range; 3],
    pub depth: Range,
}

impl Default for ParamRanges {
    /// Red attenuates fastest; background light leans blue-green.
    fn default() -> Self {
        ParamRanges {
            beta: [
                Range::new(0.6, 1.2),
                Range::new(0.2, 0.6),
                Range::new(0.1, 0.4),
            ],
            background: [
                Range::new(0.0, 0.2),
                Range::new(0.3, 0.6),
                Range::new(0.4, 0.7),
            ],
            depth: Range::new(1.0, 8.0),
        }
    }
}

impl ParamRanges {
    pub fn validate(&self) -> Result<()> {
        let all = self
            .beta
            .iter()
            .chain(&self.background)
            .chain(std::iter::once(&self.depth));
        for r in all {
            if !(r.min <= r.max) {
                return Err(Error::Config(format!("range {r:?} is not ordered")));
            }
        }
        if self
            .beta
            .iter()
            .chain(std::iter::once(&self.depth))
            .any(|r| r.min < 0.0)
        {
            return Err(Error::Config(
                "attenuation and depth ranges must be non-negative".into(),
            ));
        }
        if self.background.iter().any(|r| r.min < 0.0 || r.max > 1.0) {
            return Err(Error::Config("background ranges must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> DegradationParams {
        let beta = [
            self.beta[0].sample(rng),
            self.beta[1].sample(rng),
            self.beta[2].sample(rng),
        ];
        let mut background = [
            self.background[0].sample(rng),
            self.background[1].sample(rng),
            self.background[2].sample(rng),
        ];
        // Keep the blue-green bias even when the red and blue ranges overlap.
        if background[2] < background[0] {
            background.swap(0, 2);
        }
        DegradationParams {
            beta,
            background,
            depth: DepthSpec::Constant {
                meters: self.depth.sample(rng),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDatasetSpec {
    pub source_dir: PathBuf,
    pub count: usize,
    #[serde(default)]
    pub param_ranges: ParamRanges,
    pub seed: u64,
    pub output_dir: PathBuf,
}

/// One line of a dataset manifest. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub clean: PathBuf,
    pub degraded: PathBuf,
    pub beta: [f64; 3],
    pub background: [f64; 3],
    pub depth: DepthSpec,
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Image files (png/jpg/jpeg) in `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                    .unwrap_or(false)
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Per-pair RNG stream derived from the run seed and the pair index.
pub fn pair_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Writes `count` degraded/clean pairs plus `manifest.jsonl` into `output_dir`.
///
/// Pair `i` degrades source image `i mod sources` with parameters drawn
/// from the stream `(seed, i)`.
pub fn synthesize_dataset(spec: &SynthDatasetSpec) -> Result<Vec<ManifestRecord>> {
    if spec.count == 0 {
        return Err(Error::Config("count must be at least 1".into()));
    }
    spec.param_ranges.validate()?;
    let sources = list_images(&spec.source_dir)?;
    if sources.is_empty() {
        return Err(Error::Dataset(format!(
            "no images found in {}",
            spec.source_dir.display()
        )));
    }
    let clean_dir = spec.output_dir.join("clean");
    let degraded_dir = spec.output_dir.join("degraded");
    for d in [&clean_dir, &degraded_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    let mut records = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let src = &sources[i % sources.len()];
        let clean = load_image(src)?;
        let mut rng = pair_rng(spec.seed, i);
        let params = spec.param_ranges.sample(&mut rng);
        let degraded = params.apply(&clean)?;

        let name = format!("{i:05}.png");
        save_image(&clean, clean_dir.join(&name))?;
        save_image(&degraded, degraded_dir.join(&name))?;
        records.push(ManifestRecord {
            clean: Path::new("clean").join(&name),
            degraded: Path::new("degraded").join(&name),
            beta: params.beta,
            background: params.background,
            depth: params.depth,
        });
    }
    write_manifest(&spec.output_dir.join(MANIFEST_NAME), &records)?;
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r)?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}

/// Clean synthetic scene: a two-colour gradient backdrop with a few flat
/// discs and rectangles and a faint sinusoidal texture.
pub fn procedural_scene(h: usize, w: usize, rng: &mut impl Rng) -> ImageTensor {
    let color = |rng: &mut dyn rand::RngCore| -> [f64; 3] {
        [
            rng.gen_range(0.1..0.9),
            rng.gen_range(0.1..0.9),
            rng.gen_range(0.1..0.9),
        ]
    };
    let top = color(rng);
    let bottom = color(rng);
    let mut img = Array4::zeros((1, 3, h, w));
    for y in 0..h {
        let a = if h > 1 {
            y as f64 / (h - 1) as f64
        } else {
            0.0
        };
        for x in 0..w {
            for c in 0..3 {
                img[[0, c, y, x]] = top[c] * (1.0 - a) + bottom[c] * a;
            }
        }
    }
    let shapes = rng.gen_range(3..=6);
    for _ in 0..shapes {
        let fill = color(rng);
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let size = rng.gen_range(0.1..0.35) * h.min(w) as f64;
        let disc = rng.gen_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let inside = if disc {
                    dy * dy + dx * dx <= size * size
                } else {
                    dy.abs() <= size && dx.abs() <= 0.6 * size
                };
                if inside {
                    for c in 0..3 {
                        img[[0, c, y, x]] = fill[c];
                    }
                }
            }
        }
    }
    let (fy, fx) = (rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8));
    let amp = rng.gen_range(0.0..0.06);
    for y in 0..h {
        for x in 0..w {
            let t = amp * (fy * y as f64).sin() * (fx * x as f64).cos();
            for c in 0..3 {
                img[[0, c, y, x]] += t;
            }
        }
    }
    ImageTensor::from_clamped(img).expect("three channels")
}

/// Writes `count` procedural scenes of size `h x w` into `dir` as PNG.
pub fn write_procedural_sources(
    dir: &Path,
    count: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    if count == 0 || h == 0 || w == 0 {
        return Err(Error::Config(
            "scene count and size must be positive".into(),
        ));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = pair_rng(seed ^ 0x5c3e_5c3e, i);
        let path = dir.join(format!("scene{i:05}.png"));
        save_image(&procedural_scene(h, w, &mut rng), &path)?;
        out.push(path);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn transmission_limits() {
        let zero = Array2::zeros((3, 4));
        let t = transmission_map(&zero, [0.5, 1.0, 2.0]).unwrap();
        assert!(t.iter().all(|v| *v == 1.0));

        let one = Array2::from_elem((2, 2), 1.0);
        let ln2 = std::f64::consts::LN_2;
        let t = transmission_map(&one, [ln2; 3]).unwrap();
        assert!(t.iter().all(|v| (v - 0.5).abs() < 1e-15));

        let deep = Array2::from_elem((2, 2), 100.0);
        let t = transmission_map(&deep, [0.0; 3]).unwrap();
        assert!(t.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn transmission_rejects_negative_inputs() {
        assert!(transmission_map(&Array2::from_elem((1, 1), -1.0), [0.1; 3]).is_err());
        assert!(transmission_map(&Array2::from_elem((1, 1), 1.0), [0.1, -0.1, 0.1]).is_err());
    }

    #[test]
    fn degrade_limbs() {
        let clean = ImageTensor::filled(1, 2, 3, 0.8);
        let bg = [0.2, 0.3, 0.4];
        let out = degrade(&clean, &Array3::ones((3, 2, 3)), bg).unwrap();
        assert_eq!(out, clean);

        let out = degrade(&clean, &Array3::zeros((3, 2, 3)), bg).unwrap();
        for c in 0..3 {
            assert!(out
                .data()
                .index_axis(ndarray::Axis(1), c)
                .iter()
                .all(|v| *v == bg[c]));
        }

        let out = degrade(&clean, &Array3::from_elem((3, 2, 3), 0.5), [0.2; 3]).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn degrade_shape_mismatch() {
        let clean = ImageTensor::filled(1, 2, 3, 0.8);
        assert!(matches!(
            degrade(&clean, &Array3::ones((3, 3, 2)), [0.0; 3]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn ramp_and_map_depth() {
        let r = DepthSpec::Ramp {
            min: 1.0,
            max: 3.0,
            axis: 1,
        }
        .render(2, 3)
        .unwrap();
        assert_eq!(r.row(0).to_vec(), vec![1.0, 2.0, 3.0]);
        let m = DepthSpec::Map {
            height: 1,
            width: 2,
            values: vec![0.5, 1.5],
        };
        assert_eq!(m.render(1, 2).unwrap()[[0, 1]], 1.5);
        assert!(m.render(2, 2).is_err());
    }

    #[test]
    fn sampled_params_respect_ranges() {
        let ranges = ParamRanges::default();
        let mut rng = pair_rng(5, 0);
        for _ in 0..100 {
            let p = ranges.sample(&mut rng);
            assert!(p.beta[0] >= 0.6 && p.beta[0] <= 1.2);
            assert!(p.background[2] >= p.background[0]);
            p.validate().unwrap();
        }
    }

    #[test]
    fn unordered_ranges_rejected() {
        let mut ranges = ParamRanges::default();
        ranges.depth = Range::new(3.0, 1.0);
        assert!(ranges.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn degrade_is_monotone_in_clean(j in 0.0f64..0.9, dj in 0.0f64..0.1,
                                             t in 0.0f64..=1.0, b in 0.0f64..=1.0) {
                let tm = Array3::from_elem((3, 1, 1), t);
                let lo = degrade(&ImageTensor::filled(1, 1, 1, j), &tm, [b; 3]).unwrap();
                let hi = degrade(&ImageTensor::filled(1, 1, 1, j + dj), &tm, [b; 3]).unwrap();
                prop_assert!(hi.data()[[0, 0, 0, 0]] >= lo.data()[[0, 0, 0, 0]]);
            }

            #[test]
            fn transmission_decreases_with_depth_and_beta(d in 0.0f64..10.0, dd in 0.0f64..5.0,
                                                          beta in 0.0f64..2.0, db in 0.0f64..1.0) {
                let at = |d: f64, b: f64| transmission_map(&Array2::from_elem((1, 1), d), [b; 3]).unwrap()[[0, 0, 0]];
                prop_assert!(at(d + dd, beta) <= at(d, beta));
                prop_assert!(at(d, beta + db) <= at(d, beta));
                prop_assert!(at(d, beta) > 0.0 && at(d, beta) <= 1.0);
            }
        }
    }
}
