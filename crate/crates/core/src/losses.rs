//! Charbonnier reconstruction loss, feature-space perceptual loss, and their
//! weighted sum.

use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d};
use crate::weights::{ParamSpec, WeightStore};

pub const DEFAULT_EPSILON: f64 = 1e-3;
pub const DEFAULT_LAMBDA1: f64 = 1.0;
pub const DEFAULT_LAMBDA2: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub epsilon: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// 1-based extractor stages compared by the perceptual term.
    pub perceptual_layers: [usize; 2],
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            epsilon: DEFAULT_EPSILON,
            lambda1: DEFAULT_LAMBDA1,
            lambda2: DEFAULT_LAMBDA2,
            perceptual_layers: [2, 3],
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.perceptual_layers.contains(&0) {
            return Err(Error::Config("perceptual layers are 1-based".into()));
        }
        Ok(())
    }
}

fn check_same(x: &Array4<f64>, y: &Array4<f64>) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::Shape(format!(
            "loss operands differ in shape: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    if x.is_empty() {
        return Err(Error::Shape("empty loss operands".into()));
    }
    Ok(())
}

/// Mean over all elements of `sqrt((x - y)^2 + eps^2)`.
///
/// Evaluated as `eps + mean(d^2 / (sqrt(d^2 + eps^2) + eps))`, which is the
/// same quantity but returns exactly `eps` when `x == y`.
pub fn charbonnier(x: &Array4<f64>, y: &Array4<f64>, epsilon: f64) -> Result<f64> {
    check_same(x, y)?;
    let e2 = epsilon * epsilon;
    let excess: f64 = x
        .iter()
        .zip(y.iter())
        .map(|(a, b)| {
            let d2 = (a - b) * (a - b);
            d2 / ((d2 + e2).sqrt() + epsilon)
        })
        .sum();
    Ok(epsilon + excess / x.len() as f64)
}

/// Gradient of [`charbonnier`] with respect to `x`.
pub fn charbonnier_grad(x: &Array4<f64>, y: &Array4<f64>, epsilon: f64) -> Result<Array4<f64>> {
    check_same(x, y)?;
    let n = x.len() as f64;
    let e2 = epsilon * epsilon;
    let mut g = x - y;
    g.mapv_inplace(|d| d / ((d * d + e2).sqrt() * n));
    Ok(g)
}

pub const EXTRACTOR_CHANNELS: [usize; 4] = [16, 32, 64, 64];
pub const EXTRACTOR_SEED: u64 = 0x5eed_f00d;

/// Fixed stack of stride-2 3x3 convolutions with ReLU; stage `j` (1-based)
/// has `EXTRACTOR_CHANNELS[j-1]` channels at `1/2^j` resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    pub stages: Vec<Conv2d>,
    pub weights: WeightStore,
}

struct ExtractorTrace {
    inputs: Vec<Array4<f64>>,
    pre: Vec<Array4<f64>>,
    outputs: Vec<Array4<f64>>,
}

impl FeatureExtractor {
    pub fn architecture() -> Vec<Conv2d> {
        let mut c_in = 3;
        EXTRACTOR_CHANNELS
            .iter()
            .enumerate()
            .map(|(j, &c)| {
                let conv =
                    Conv2d::new(format!("extractor.stage{}", j + 1), c_in, c, 3).with_stride(2);
                c_in = c;
                conv
            })
            .collect()
    }

    pub fn params() -> Vec<ParamSpec> {
        Self::architecture()
            .iter()
            .flat_map(|c| c.params())
            .collect()
    }

    /// Deterministic extractor drawn from `seed`.
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = WeightStore::initialize(&Self::params(), &mut rng);
        weights.meta.seed = seed;
        FeatureExtractor {
            stages: Self::architecture(),
            weights,
        }
    }

    /// Extractor using externally supplied weights (e.g. loaded from a checkpoint).
    pub fn from_weights(weights: WeightStore) -> Result<Self> {
        weights.check_against(&Self::params())?;
        Ok(FeatureExtractor {
            stages: Self::architecture(),
            weights,
        })
    }

    pub fn depth(&self) -> usize {
        self.stages.len()
    }

    fn run(&self, x: &Array4<f64>, upto: usize) -> Result<ExtractorTrace> {
        let (_, _, h, w) = x.dim();
        let need = 1usize << (upto - 1);
        if h < need || w < need {
            return Err(Error::TooSmall(format!(
                "perceptual stage {upto} needs at least {need}x{need} pixels, got {h}x{w}"
            )));
        }
        let mut trace = ExtractorTrace {
            inputs: Vec::new(),
            pre: Vec::new(),
            outputs: Vec::new(),
        };
        let mut cur = x.clone();
        for conv in &self.stages[..upto] {
            let pre = conv.forward(&self.weights, &cur)?;
            let out = nn::relu(&pre);
            trace.inputs.push(cur);
            trace.pre.push(pre);
            trace.outputs.push(out.clone());
            cur = out;
        }
        Ok(trace)
    }

    /// Output of stage `j` (1-based).
    pub fn features(&self, x: &Array4<f64>, stage: usize) -> Result<Array4<f64>> {
        self.check_stage(stage)?;
        Ok(self
            .run(x, stage)?
            .outputs
            .pop()
            .expect("at least one stage"))
    }

    fn check_stage(&self, stage: usize) -> Result<()> {
        if stage == 0 || stage > self.depth() {
            return Err(Error::InvalidArgument(format!(
                "extractor stage {stage} outside 1..={}",
                self.depth()
            )));
        }
        Ok(())
    }
}

fn mean_abs_diff(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(p, q)| (p - q).abs())
        .sum::<f64>()
        / a.len() as f64
}

/// Sum over the two stages of the mean absolute feature difference.
pub fn perceptual(
    x: &Array4<f64>,
    y: &Array4<f64>,
    f: &FeatureExtractor,
    layers: [usize; 2],
) -> Result<f64> {
    Ok(perceptual_with_grad(x, y, f, layers, false)?.0)
}

fn perceptual_with_grad(
    x: &Array4<f64>,
    y: &Array4<f64>,
    f: &FeatureExtractor,
    layers: [usize; 2],
    want_grad: bool,
) -> Result<(f64, Option<Array4<f64>>)> {
    check_same(x, y)?;
    for &l in &layers {
        f.check_stage(l)?;
    }
    let deepest = layers[0].max(layers[1]);
    let tx = f.run(x, deepest)?;
    let ty = f.run(y, deepest)?;
    let value = layers
        .iter()
        .map(|&l| mean_abs_diff(&tx.outputs[l - 1], &ty.outputs[l - 1]))
        .sum();
    if !want_grad {
        return Ok((value, None));
    }
    let mut d: Option<Array4<f64>> = None;
    for j in (0..deepest).rev() {
        let mut g = d
            .take()
            .unwrap_or_else(|| Array4::zeros(tx.outputs[j].raw_dim()));
        for &l in &layers {
            if l - 1 == j {
                let n = g.len() as f64;
                ndarray::Zip::from(&mut g)
                    .and(&tx.outputs[j])
                    .and(&ty.outputs[j])
                    .for_each(|gv, &a, &b| *gv += sign(a - b) / n);
            }
        }
        let g = nn::relu_backward(&tx.pre[j], &g);
        let mut scratch = WeightStore::new();
        d = Some(f.stages[j].backward(&f.weights, &tx.inputs[j], &g, &mut scratch)?);
    }
    Ok((value, d))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    pub charbonnier: f64,
    pub perceptual: f64,
    /// Gradient of `total` with respect to the prediction.
    pub grad: Array4<f64>,
}

/// `lambda1 * charbonnier + lambda2 * perceptual` and its gradient w.r.t. `x`.
/// The perceptual term is skipped entirely when `lambda2 == 0`.
pub fn total_loss(
    x: &Array4<f64>,
    y: &Array4<f64>,
    cfg: &LossConfig,
    f: &FeatureExtractor,
) -> Result<LossOutput> {
    cfg.validate()?;
    let c = charbonnier(x, y, cfg.epsilon)?;
    let mut grad = charbonnier_grad(x, y, cfg.epsilon)? * cfg.lambda1;
    let p = if cfg.lambda2 > 0.0 {
        let (p, g) = perceptual_with_grad(x, y, f, cfg.perceptual_layers, true)?;
        grad.scaled_add(cfg.lambda2, &g.expect("gradient requested"));
        p
    } else {
        0.0
    };
    Ok(LossOutput {
        total: cfg.lambda1 * c + cfg.lambda2 * p,
        charbonnier: c,
        perceptual: p,
        grad,
    })
}
