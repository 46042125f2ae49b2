//! Primary network: a per-pixel (1x1 convolution) pipeline whose layers are
//! modulated by scale/shift pairs predicted from the condition vector.

use ndarray::{s, Array2, Array4, Axis};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::{self, Conv2d, GroupNorm, Linear};
use crate::weights::{Init, ParamSpec, WeightStore};

/// Stabilizer of every normalization in the primary network.
pub const NORM_EPS: f64 = 1e-5;

/// Expansion factor of the first 1x1 convolution in each TFE branch.
pub const TFE_EXPANSION: usize = 2;

/// Three-branch block. Channels are split into three contiguous groups; each
/// group runs `1x1 conv (expand) -> group norm -> leaky relu -> 1x1 conv`
/// with its own weights, and the concatenated result is added to the input.
#[derive(Debug, Clone, PartialEq)]
pub struct TfeBlock {
    pub channels: usize,
    pub branches: [TfeBranch; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TfeBranch {
    pub expand: Conv2d,
    pub norm: GroupNorm,
    pub project: Conv2d,
}

#[derive(Debug, Clone)]
pub struct TfeCache {
    branches: Vec<TfeBranchCache>,
}

#[derive(Debug, Clone)]
struct TfeBranchCache {
    input: Array4<f64>,
    norm: nn::NormCache,
    normed: Array4<f64>,
    act: Array4<f64>,
}

impl TfeCache {
    /// Smallest magnitude among the leaky relu inputs.
    pub fn activation_margin(&self) -> f64 {
        self.branches
            .iter()
            .map(|b| min_abs(&b.normed))
            .fold(f64::INFINITY, f64::min)
    }
}

fn min_abs(a: &Array4<f64>) -> f64 {
    a.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

impl TfeBlock {
    pub fn new(name: &str, channels: usize) -> Result<Self> {
        if channels % 3 != 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "TFE needs a positive channel count divisible by 3, got {channels}"
            )));
        }
        let g = channels / 3;
        let hidden = g * TFE_EXPANSION;
        let branch = |i: usize| TfeBranch {
            expand: Conv2d::pointwise(format!("{name}.branch{i}.expand"), g, hidden),
            norm: GroupNorm::new(format!("{name}.branch{i}.norm"), hidden, 1, NORM_EPS),
            project: Conv2d::pointwise(format!("{name}.branch{i}.project"), hidden, g),
        };
        Ok(TfeBlock {
            channels,
            branches: [branch(0), branch(1), branch(2)],
        })
    }

    pub fn params(&self) -> Vec<ParamSpec> {
        self.branches
            .iter()
            .flat_map(|b| {
                let mut p = b.expand.params();
                p.extend(b.norm.params());
                p.extend(b.project.params());
                p
            })
            .collect()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.branches
            .iter()
            .map(|b| b.expand.macs(h, w) + b.project.macs(h, w))
            .sum()
    }

    pub fn forward(&self, ws: &WeightStore, x: &Array4<f64>) -> Result<(Array4<f64>, TfeCache)> {
        if x.shape()[1] != self.channels {
            return Err(Error::Shape(format!(
                "TFE expects {} channels, got {}",
                self.channels,
                x.shape()[1]
            )));
        }
        let g = self.channels / 3;
        let mut outs = Vec::with_capacity(3);
        let mut caches = Vec::with_capacity(3);
        for (i, b) in self.branches.iter().enumerate() {
            let input = nn::channel_slice(x, i * g, (i + 1) * g);
            let expanded = b.expand.forward(ws, &input)?;
            let (normed, norm) = b.norm.forward(ws, &expanded)?;
            let act = nn::leaky_relu(&normed);
            outs.push(b.project.forward(ws, &act)?);
            caches.push(TfeBranchCache {
                input,
                norm,
                normed,
                act,
            });
        }
        Ok((
            x + &nn::concat_channels(&outs),
            TfeCache { branches: caches },
        ))
    }

    pub fn backward(
        &self,
        ws: &WeightStore,
        cache: &TfeCache,
        dy: &Array4<f64>,
        grads: &mut WeightStore,
    ) -> Result<Array4<f64>> {
        let g = self.channels / 3;
        let mut parts = Vec::with_capacity(3);
        for (i, (b, c)) in self.branches.iter().zip(&cache.branches).enumerate() {
            let dout = nn::channel_slice(dy, i * g, (i + 1) * g);
            let dact = b.project.backward(ws, &c.act, &dout, grads)?;
            let dnormed = nn::leaky_relu_backward(&c.normed, &dact);
            let dexpanded = b.norm.backward(ws, &c.norm, &dnormed, grads)?;
            parts.push(b.expand.backward(ws, &c.input, &dexpanded, grads)?);
        }
        Ok(dy + &nn::concat_channels(&parts))
    }
}

/// Per-layer transform before modulation.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerBody {
    /// Three-branch feature extraction.
    Tfe(TfeBlock),
    /// `leaky(instance_norm(conv1x1(x)))`, the normalization substitute.
    InstanceNorm { conv: Conv2d, norm: GroupNorm },
    /// `leaky(conv1x1(x))`, the baseline layer.
    Plain { conv: Conv2d },
}

#[derive(Debug, Clone)]
pub enum BodyCache {
    Tfe(TfeCache),
    InstanceNorm {
        input: Array4<f64>,
        norm: nn::NormCache,
        normed: Array4<f64>,
    },
    Plain {
        input: Array4<f64>,
        pre: Array4<f64>,
    },
}

impl LayerBody {
    fn params(&self) -> Vec<ParamSpec> {
        match self {
            LayerBody::Tfe(t) => t.params(),
            LayerBody::InstanceNorm { conv, norm } => {
                let mut p = conv.params();
                p.extend(norm.params());
                p
            }
            LayerBody::Plain { conv } => conv.params(),
        }
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        match self {
            LayerBody::Tfe(t) => t.macs(h, w),
            LayerBody::InstanceNorm { conv, .. } | LayerBody::Plain { conv } => conv.macs(h, w),
        }
    }

    fn forward(&self, ws: &WeightStore, x: &Array4<f64>) -> Result<(Array4<f64>, BodyCache)> {
        match self {
            LayerBody::Tfe(t) => {
                let (y, c) = t.forward(ws, x)?;
                Ok((y, BodyCache::Tfe(c)))
            }
            LayerBody::InstanceNorm { conv, norm } => {
                let pre = conv.forward(ws, x)?;
                let (normed, nc) = norm.forward(ws, &pre)?;
                Ok((
                    nn::leaky_relu(&normed),
                    BodyCache::InstanceNorm {
                        input: x.clone(),
                        norm: nc,
                        normed,
                    },
                ))
            }
            LayerBody::Plain { conv } => {
                let pre = conv.forward(ws, x)?;
                Ok((
                    nn::leaky_relu(&pre),
                    BodyCache::Plain {
                        input: x.clone(),
                        pre,
                    },
                ))
            }
        }
    }

    fn backward(
        &self,
        ws: &WeightStore,
        cache: &BodyCache,
        dy: &Array4<f64>,
        grads: &mut WeightStore,
    ) -> Result<Array4<f64>> {
        match (self, cache) {
            (LayerBody::Tfe(t), BodyCache::Tfe(c)) => t.backward(ws, c, dy, grads),
            (
                LayerBody::InstanceNorm { conv, norm },
                BodyCache::InstanceNorm {
                    input,
                    norm: nc,
                    normed,
                },
            ) => {
                let d = nn::leaky_relu_backward(normed, dy);
                let d = norm.backward(ws, nc, &d, grads)?;
                conv.backward(ws, input, &d, grads)
            }
            (LayerBody::Plain { conv }, BodyCache::Plain { input, pre }) => {
                let d = nn::leaky_relu_backward(pre, dy);
                conv.backward(ws, input, &d, grads)
            }
            _ => Err(Error::Shape("layer cache does not match layer".into())),
        }
    }
}

/// Per-channel affine modulation `gamma * x + beta`, broadcast over space.
/// `gamma` and `beta` are `(N, C)`.
pub fn gsm_modulate(
    x: &Array4<f64>,
    gamma: &Array2<f64>,
    beta: &Array2<f64>,
) -> Result<Array4<f64>> {
    let (n, c, _, _) = x.dim();
    if gamma.dim() != (n, c) || beta.dim() != (n, c) {
        return Err(Error::Shape(format!(
            "modulation expects ({n}, {c}) scale and shift, got {:?} and {:?}",
            gamma.dim(),
            beta.dim()
        )));
    }
    let mut y = x.clone();
    for i in 0..n {
        for ch in 0..c {
            let (g, b) = (gamma[[i, ch]], beta[[i, ch]]);
            y.slice_mut(s![i, ch, .., ..]).mapv_inplace(|v| g * v + b);
        }
    }
    Ok(y)
}

/// One primary layer: body followed by condition-driven modulation.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimaryLayer {
    pub body: LayerBody,
    /// Maps the condition vector to `[gamma - 1, beta]` (length `2 W`).
    pub affine: Linear,
}

impl PrimaryLayer {
    /// `(gamma, beta)` for a batch of condition vectors `(N, D)`.
    pub fn gsm_affine(
        &self,
        ws: &WeightStore,
        v: &Array2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let out = self.affine.forward(ws, v)?;
        let width = self.affine.out_features / 2;
        let gamma = out.slice(s![.., ..width]).mapv(|x| 1.0 + x);
        let beta = out.slice(s![.., width..]).to_owned();
        Ok((gamma, beta))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrimaryNet {
    pub width: usize,
    pub stem: Conv2d,
    pub layers: Vec<PrimaryLayer>,
    pub head: Conv2d,
}

#[derive(Debug, Clone)]
pub struct PrimaryCache {
    input: Array4<f64>,
    condition: Array2<f64>,
    layers: Vec<LayerCache>,
    last: Array4<f64>,
    /// Output before the final clamp to `[0, 1]`.
    pub pre_clamp: Array4<f64>,
}

impl PrimaryCache {
    /// Smallest magnitude among all leaky relu inputs, i.e. the distance of
    /// the forward pass from the nearest kink.
    pub fn activation_margin(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| match &l.body {
                BodyCache::Tfe(c) => c.activation_margin(),
                BodyCache::InstanceNorm { normed, .. } => min_abs(normed),
                BodyCache::Plain { pre, .. } => min_abs(pre),
            })
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    body: BodyCache,
    body_out: Array4<f64>,
    gamma: Array2<f64>,
}

impl PrimaryNet {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let w = cfg.primary_width;
        let mut layers = Vec::with_capacity(cfg.primary_layers);
        for i in 0..cfg.primary_layers {
            let name = format!("primary.layer{i}");
            let body = if cfg.toggles.use_tfe {
                LayerBody::Tfe(TfeBlock::new(&format!("{name}.tfe"), w)?)
            } else if cfg.toggles.substitute_instance_norm {
                LayerBody::InstanceNorm {
                    conv: Conv2d::pointwise(format!("{name}.conv"), w, w),
                    norm: GroupNorm::new(format!("{name}.norm"), w, w, NORM_EPS),
                }
            } else {
                LayerBody::Plain {
                    conv: Conv2d::pointwise(format!("{name}.conv"), w, w),
                }
            };
            layers.push(PrimaryLayer {
                body,
                affine: Linear::new(format!("{name}.gsm"), cfg.condition_width, 2 * w)
                    .with_init(Init::Small),
            });
        }
        Ok(PrimaryNet {
            width: w,
            stem: Conv2d::pointwise("primary.stem", 3, w),
            layers,
            head: Conv2d::pointwise("primary.head", w, 3).zero_initialized(),
        })
    }

    pub fn params(&self) -> Vec<ParamSpec> {
        let mut p = self.stem.params();
        for l in &self.layers {
            p.extend(l.body.params());
            p.extend(l.affine.params());
        }
        p.extend(self.head.params());
        p
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let modulation = (self.width * h * w) as u64;
        self.stem.macs(h, w)
            + self
                .layers
                .iter()
                .map(|l| l.body.macs(h, w) + l.affine.macs() + modulation)
                .sum::<u64>()
            + self.head.macs(h, w)
    }

    /// `(gamma, beta)` of layer `layer` (1-based) for condition vectors `(N, D)`.
    pub fn gsm_affine(
        &self,
        ws: &WeightStore,
        v: &Array2<f64>,
        layer: usize,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        if layer == 0 || layer > self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "layer index {layer} outside 1..={}",
                self.layers.len()
            )));
        }
        self.layers[layer - 1].gsm_affine(ws, v)
    }

    /// Enhanced image clamped to `[0, 1]`, plus the cache for the backward pass.
    pub fn forward(
        &self,
        ws: &WeightStore,
        x: &Array4<f64>,
        v: &Array2<f64>,
    ) -> Result<(Array4<f64>, PrimaryCache)> {
        if x.shape()[1] != 3 {
            return Err(Error::Shape(format!(
                "primary network expects 3 channels, got {}",
                x.shape()[1]
            )));
        }
        if v.shape()[0] != x.shape()[0] {
            return Err(Error::Shape(format!(
                "{} condition vectors for a batch of {}",
                v.shape()[0],
                x.shape()[0]
            )));
        }
        let mut h = self.stem.forward(ws, x)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (body_out, body) = l.body.forward(ws, &h)?;
            let (gamma, beta) = l.gsm_affine(ws, v)?;
            h = gsm_modulate(&body_out, &gamma, &beta)?;
            layers.push(LayerCache {
                body,
                body_out,
                gamma,
            });
        }
        let pre_clamp = x + &self.head.forward(ws, &h)?;
        let y = pre_clamp.mapv(|p| p.clamp(0.0, 1.0));
        Ok((
            y,
            PrimaryCache {
                input: x.clone(),
                condition: v.clone(),
                layers,
                last: h,
                pre_clamp,
            },
        ))
    }

    /// Output of the forward pass without keeping intermediate activations.
    pub fn infer(&self, ws: &WeightStore, x: &Array4<f64>, v: &Array2<f64>) -> Result<Array4<f64>> {
        let mut h = self.stem.forward(ws, x)?;
        for l in &self.layers {
            let (body_out, _) = l.body.forward(ws, &h)?;
            let (gamma, beta) = l.gsm_affine(ws, v)?;
            h = gsm_modulate(&body_out, &gamma, &beta)?;
        }
        let mut y = self.head.forward(ws, &h)?;
        y += x;
        y.mapv_inplace(|p| p.clamp(0.0, 1.0));
        Ok(y)
    }

    /// Returns `(d input, d condition)`. The clamp passes gradient only where
    /// the unclamped output lies inside `[0, 1]`.
    pub fn backward(
        &self,
        ws: &WeightStore,
        cache: &PrimaryCache,
        dy: &Array4<f64>,
        grads: &mut WeightStore,
    ) -> Result<(Array4<f64>, Array2<f64>)> {
        let mut dpre = dy.clone();
        ndarray::Zip::from(&mut dpre)
            .and(&cache.pre_clamp)
            .for_each(|d, &p| {
                if !(0.0..=1.0).contains(&p) {
                    *d = 0.0;
                }
            });
        let mut dx = dpre.clone();
        let mut dh = self.head.backward(ws, &cache.last, &dpre, grads)?;
        let mut dv = Array2::zeros(cache.condition.raw_dim());
        for (l, c) in self.layers.iter().zip(&cache.layers).rev() {
            let dgamma = nn::spatial_dot(&dh, &c.body_out);
            let dbeta = dh.sum_axis(Axis(3)).sum_axis(Axis(2));
            let daffine = ndarray::concatenate(Axis(1), &[dgamma.view(), dbeta.view()])
                .map_err(|e| Error::Shape(e.to_string()))?;
            dv += &l.affine.backward(ws, &cache.condition, &daffine, grads)?;
            let dbody = nn::scale_channels(&dh, &c.gamma);
            dh = l.body.backward(ws, &c.body, &dbody, grads)?;
        }
        dx += &self.stem.backward(ws, &cache.input, &dh, grads)?;
        Ok((dx, dv))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn(shape, || rng.gen_range(0.0..1.0))
    }

    #[test]
    fn zero_weight_tfe_is_identity() {
        let t = TfeBlock::new("t", 6).unwrap();
        let mut ws =
            WeightStore::initialize(&t.params(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(0));
        ws.scale(0.0);
        let x = random((2, 6, 5, 4), 1);
        assert_eq!(t.forward(&ws, &x).unwrap().0, x);
        assert!(TfeBlock::new("t", 8).is_err());
    }

    #[test]
    fn constant_input_stays_finite() {
        let t = TfeBlock::new("t", 6).unwrap();
        let ws =
            WeightStore::initialize(&t.params(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(0));
        let x = Array4::from_shape_fn((1, 6, 4, 4), |(_, c, _, _)| c as f64 * 0.1);
        assert!(t.forward(&ws, &x).unwrap().0.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn tfe_is_pixel_permutation_equivariant() {
        let t = TfeBlock::new("t", 6).unwrap();
        let ws =
            WeightStore::initialize(&t.params(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(3));
        let x = random((1, 6, 4, 5), 2);
        let perm: Vec<usize> = (0..20).map(|i| (i * 7 + 3) % 20).collect();
        let permute = |a: &Array4<f64>| {
            Array4::from_shape_fn(a.dim(), |(n, c, y, x)| {
                let p = perm[y * 5 + x];
                a[[n, c, p / 5, p % 5]]
            })
        };
        let lhs = t.forward(&ws, &permute(&x)).unwrap().0;
        let rhs = permute(&t.forward(&ws, &x).unwrap().0);
        assert!((lhs - rhs).iter().all(|d| d.abs() < 1e-6));
    }

    #[test]
    fn gsm_examples() {
        let x = Array4::ones((1, 2, 2, 2));
        let one = Array2::ones((1, 2));
        let zero = Array2::zeros((1, 2));
        assert_eq!(gsm_modulate(&x, &one, &zero).unwrap(), x);
        let y = gsm_modulate(&x, &(&one * 2.0), &(&one * 0.5)).unwrap();
        assert!(y.iter().all(|v| *v == 2.5));
        let y = gsm_modulate(&random((1, 2, 3, 3), 1), &zero, &(&one * 0.3)).unwrap();
        assert!(y.iter().all(|v| *v == 0.3));
        assert!(gsm_modulate(&x, &Array2::ones((1, 3)), &zero).is_err());
    }

    #[test]
    fn gsm_affine_contracts() {
        let cfg = ModelConfig::default();
        let net = PrimaryNet::new(&cfg).unwrap();
        let ws = WeightStore::initialize(
            &net.params(),
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(9),
        );
        let zero = Array2::zeros((1, cfg.condition_width));
        let (g, b) = net.gsm_affine(&ws, &zero, 1).unwrap();
        assert!(g.iter().all(|v| *v == 1.0) && b.iter().all(|v| *v == 0.0));
        assert!(net.gsm_affine(&ws, &zero, 0).is_err());
        assert!(net.gsm_affine(&ws, &zero, cfg.primary_layers + 1).is_err());

        let v = Array2::from_shape_fn((1, cfg.condition_width), |(_, j)| (j as f64 * 0.37).sin());
        let (g1, b1) = net.gsm_affine(&ws, &v, 2).unwrap();
        let (g2, b2) = net.gsm_affine(&ws, &(&v * 2.0), 2).unwrap();
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert!(((b - 1.0) - 2.0 * (a - 1.0)).abs() < 1e-12);
        }
        for (a, b) in b1.iter().zip(b2.iter()) {
            assert!((b - 2.0 * a).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_head_passes_input_through() {
        let cfg = ModelConfig::default();
        let net = PrimaryNet::new(&cfg).unwrap();
        let ws = WeightStore::initialize(
            &net.params(),
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(9),
        );
        let x = random((1, 3, 7, 13), 4);
        let v = Array2::from_elem((1, cfg.condition_width), 0.5);
        let (y, _) = net.forward(&ws, &x, &v).unwrap();
        assert_eq!(y, x);
        assert_eq!(net.infer(&ws, &x, &v).unwrap(), x);
    }
}
