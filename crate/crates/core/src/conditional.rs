//! Conditional network: a strided convolutional encoder whose stages mix a
//! Fourier-domain magnitude gate (global, low-frequency context) with a
//! two-scale depthwise/dilated convolutional attention (local detail). The
//! globally pooled output is the condition vector that modulates the primary
//! network.

use ndarray::{Array2, Array4};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::{self, fft, Conv2d, Linear};
use crate::weights::{ParamSpec, WeightStore};

/// One branch of the multi-scale attention: a `(2d-1)` depthwise conv, then a
/// `ceil(K/d)` depthwise conv with dilation `d`, approximating a `K x K` kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct McamScale {
    /// Nominal large-kernel size `K`.
    pub kernel: usize,
    pub dilation: usize,
}

impl McamScale {
    pub fn dw_kernel(&self) -> usize {
        2 * self.dilation - 1
    }

    pub fn dwd_kernel(&self) -> usize {
        self.kernel.div_ceil(self.dilation)
    }

    pub fn receptive_field(&self) -> usize {
        self.dw_kernel() + (self.dwd_kernel() - 1) * self.dilation
    }

    pub fn validate(&self) -> Result<()> {
        if self.dilation < 2 {
            return Err(Error::Config(format!(
                "dilation must be >= 2, got {}",
                self.dilation
            )));
        }
        if self.dwd_kernel() % 2 == 0 {
            return Err(Error::Config(format!(
                "dilated kernel ceil({}/{}) = {} must be odd for symmetric padding",
                self.kernel,
                self.dilation,
                self.dwd_kernel()
            )));
        }
        Ok(())
    }
}

/// Default scale pair: K = 21 with d = 3 (5x5 then 7x7 dilated by 3) and
/// K = 10 with d = 2 (3x3 then 5x5 dilated by 2).
pub const DEFAULT_SCALES: [McamScale; 2] = [
    McamScale {
        kernel: 21,
        dilation: 3,
    },
    McamScale {
        kernel: 10,
        dilation: 2,
    },
];

/// Fourier magnitude gate with a residual connection:
/// `y = x + Re(IFFT(FFT(x) * sigmoid(g(|FFT(x)|))))`.
///
/// `g` is two 1x1 convolutions with a leaky rectifier between them, acting
/// across channels at every frequency bin. The gate is real and depends only
/// on the magnitude, so the phase is left untouched and Hermitian symmetry
/// (hence a real output) is preserved.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierGate {
    pub gate_in: Conv2d,
    pub gate_out: Conv2d,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct FourierGateCache {
    spectra: Vec<Array2<Complex64>>,
    magnitude: Array4<f64>,
    hidden_pre: Array4<f64>,
    hidden: Array4<f64>,
    gate: Array4<f64>,
}

impl FourierGate {
    pub fn new(name: &str, channels: usize) -> Self {
        FourierGate {
            gate_in: Conv2d::pointwise(format!("{name}.gate_in"), channels, channels),
            gate_out: Conv2d::pointwise(format!("{name}.gate_out"), channels, channels),
            channels,
        }
    }

    pub fn params(&self) -> Vec<ParamSpec> {
        let mut p = self.gate_in.params();
        p.extend(self.gate_out.params());
        p
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.gate_in.macs(h, w)
            + self.gate_out.macs(h, w)
            + 2 * self.channels as u64 * fft::flops(h, w)
    }

    pub fn forward(
        &self,
        ws: &WeightStore,
        x: &Array4<f64>,
    ) -> Result<(Array4<f64>, FourierGateCache)> {
        let (n, c, h, w) = x.dim();
        if c != self.channels {
            return Err(Error::Shape(format!(
                "Fourier gate expects {} channels, got {c}",
                self.channels
            )));
        }
        let mut spectra = Vec::with_capacity(n * c);
        let mut magnitude = Array4::zeros((n, c, h, w));
        for i in 0..n {
            for ch in 0..c {
                let spec = fft::fft2(&x.slice(ndarray::s![i, ch, .., ..]).to_owned());
                magnitude
                    .slice_mut(ndarray::s![i, ch, .., ..])
                    .zip_mut_with(&spec, |m, z| *m = z.norm());
                spectra.push(spec);
            }
        }
        let hidden_pre = self.gate_in.forward(ws, &magnitude)?;
        let hidden = nn::leaky_relu(&hidden_pre);
        let gate = self.gate_out.forward(ws, &hidden)?.mapv(nn::sigmoid);
        let mut y = x.clone();
        for i in 0..n {
            for ch in 0..c {
                let g = gate.slice(ndarray::s![i, ch, .., ..]);
                let gated = recombine(&spectra[i * c + ch], &g.to_owned());
                let back = fft::ifft2(&gated);
                y.slice_mut(ndarray::s![i, ch, .., ..])
                    .zip_mut_with(&back, |o, z| *o += z.re);
            }
        }
        Ok((
            y,
            FourierGateCache {
                spectra,
                magnitude,
                hidden_pre,
                hidden,
                gate,
            },
        ))
    }

    pub fn backward(
        &self,
        ws: &WeightStore,
        cache: &FourierGateCache,
        dy: &Array4<f64>,
        grads: &mut WeightStore,
    ) -> Result<Array4<f64>> {
        let (n, c, h, w) = dy.dim();
        let mut dgate = Array4::zeros((n, c, h, w));
        let mut dspec_direct = Vec::with_capacity(n * c);
        for i in 0..n {
            for ch in 0..c {
                // Adjoint of Re(F^H Y) is F dy.
                let gy = fft::fft2(&dy.slice(ndarray::s![i, ch, .., ..]).to_owned());
                let spec = &cache.spectra[i * c + ch];
                let g = cache.gate.slice(ndarray::s![i, ch, .., ..]);
                dgate
                    .slice_mut(ndarray::s![i, ch, .., ..])
                    .indexed_iter_mut()
                    .for_each(|(idx, d)| *d = (gy[idx].conj() * spec[idx]).re);
                let mut direct = gy;
                direct.zip_mut_with(&g, |z, gv| *z *= *gv);
                dspec_direct.push(direct);
            }
        }
        let dlogit = {
            let mut d = dgate;
            d.zip_mut_with(&cache.gate, |dv, gv| *dv *= gv * (1.0 - gv));
            d
        };
        let dhidden = self.gate_out.backward(ws, &cache.hidden, &dlogit, grads)?;
        let dhidden_pre = nn::leaky_relu_backward(&cache.hidden_pre, &dhidden);
        let dmag = self
            .gate_in
            .backward(ws, &cache.magnitude, &dhidden_pre, grads)?;

        let mut dx = dy.clone();
        for i in 0..n {
            for ch in 0..c {
                let spec = &cache.spectra[i * c + ch];
                let mut dspec = dspec_direct[i * c + ch].clone();
                for (idx, z) in dspec.indexed_iter_mut() {
                    let m = cache.magnitude[[i, ch, idx.0, idx.1]];
                    if m > 0.0 {
                        *z += spec[idx] * (dmag[[i, ch, idx.0, idx.1]] / m);
                    }
                }
                let back = fft::ifft2(&dspec);
                dx.slice_mut(ndarray::s![i, ch, .., ..])
                    .zip_mut_with(&back, |o, z| *o += z.re);
            }
        }
        Ok(dx)
    }
}

/// Scales each bin's magnitude by `gate` and keeps its phase: `(A g) e^{i phi}`.
fn recombine(spectrum: &Array2<Complex64>, gate: &Array2<f64>) -> Array2<Complex64> {
    let mut out = spectrum.clone();
    out.zip_mut_with(gate, |z, g| {
        let (mag, phase) = z.to_polar();
        *z = Complex64::from_polar(mag * g, phase);
    });
    out
}

/// Magnitude/phase split and recombination with the gate held at one, i.e.
/// the Fourier path without any gating. Used to check the spectral round trip.
pub fn ungated_round_trip(x: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::zeros((n, c, h, w));
    let ones = Array2::ones((h, w));
    for i in 0..n {
        for ch in 0..c {
            let spec = fft::fft2(&x.slice(ndarray::s![i, ch, .., ..]).to_owned());
            let back = fft::ifft2(&recombine(&spec, &ones));
            out.slice_mut(ndarray::s![i, ch, .., ..])
                .zip_mut_with(&back, |o, z| *o = z.re);
        }
    }
    out
}

/// Two-scale convolutional attention. Channels are split in halves; half `i`
/// computes `v = DW_i(x_i)`, `a = PW_i(DWD_i(v))` and emits `a * v`. The halves
/// are concatenated, fused by a 1x1 convolution and added to the input.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleAttention {
    pub channels: usize,
    pub branches: [AttentionBranch; 2],
    pub fuse: Conv2d,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBranch {
    pub dw: Conv2d,
    pub dwd: Conv2d,
    pub pw: Conv2d,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    halves: Vec<BranchCache>,
    merged: Array4<f64>,
}

#[derive(Debug, Clone)]
struct BranchCache {
    input: Array4<f64>,
    value: Array4<f64>,
    dilated: Array4<f64>,
    attention: Array4<f64>,
}

impl MultiScaleAttention {
    pub fn new(name: &str, channels: usize, scales: [McamScale; 2]) -> Result<Self> {
        if channels % 2 != 0 {
            return Err(Error::Shape(format!(
                "multi-scale attention needs an even channel count, got {channels}"
            )));
        }
        let half = channels / 2;
        let branch = |i: usize, s: McamScale| -> Result<AttentionBranch> {
            s.validate()?;
            Ok(AttentionBranch {
                dw: Conv2d::depthwise(format!("{name}.branch{i}.dw"), half, s.dw_kernel()),
                dwd: Conv2d::depthwise(format!("{name}.branch{i}.dwd"), half, s.dwd_kernel())
                    .with_dilation(s.dilation),
                pw: Conv2d::pointwise(format!("{name}.branch{i}.pw"), half, half),
            })
        };
        Ok(MultiScaleAttention {
            channels,
            branches: [branch(0, scales[0])?, branch(1, scales[1])?],
            fuse: Conv2d::pointwise(format!("{name}.fuse"), channels, channels),
        })
    }

    pub fn params(&self) -> Vec<ParamSpec> {
        let mut p = Vec::new();
        for b in &self.branches {
            p.extend(b.dw.params());
            p.extend(b.dwd.params());
            p.extend(b.pw.params());
        }
        p.extend(self.fuse.params());
        p
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let half = (self.channels / 2 * h * w) as u64;
        self.branches
            .iter()
            .map(|b| b.dw.macs(h, w) + b.dwd.macs(h, w) + b.pw.macs(h, w) + half)
            .sum::<u64>()
            + self.fuse.macs(h, w)
    }

    pub fn forward(
        &self,
        ws: &WeightStore,
        x: &Array4<f64>,
    ) -> Result<(Array4<f64>, AttentionCache)> {
        if x.shape()[1] != self.channels {
            return Err(Error::Shape(format!(
                "multi-scale attention expects {} channels, got {}",
                self.channels,
                x.shape()[1]
            )));
        }
        let half = self.channels / 2;
        let mut outs = Vec::with_capacity(2);
        let mut halves = Vec::with_capacity(2);
        for (i, b) in self.branches.iter().enumerate() {
            let input = nn::channel_slice(x, i * half, (i + 1) * half);
            let value = b.dw.forward(ws, &input)?;
            let dilated = b.dwd.forward(ws, &value)?;
            let attention = b.pw.forward(ws, &dilated)?;
            outs.push(&attention * &value);
            halves.push(BranchCache {
                input,
                value,
                dilated,
                attention,
            });
        }
        let merged = nn::concat_channels(&outs);
        let y = x + &self.fuse.forward(ws, &merged)?;
        Ok((y, AttentionCache { halves, merged }))
    }

    pub fn backward(
        &self,
        ws: &WeightStore,
        cache: &AttentionCache,
        dy: &Array4<f64>,
        grads: &mut WeightStore,
    ) -> Result<Array4<f64>> {
        let half = self.channels / 2;
        let dmerged = self.fuse.backward(ws, &cache.merged, dy, grads)?;
        let mut parts = Vec::with_capacity(2);
        for (i, (b, c)) in self.branches.iter().zip(&cache.halves).enumerate() {
            let dout = nn::channel_slice(&dmerged, i * half, (i + 1) * half);
            let dattention = &dout * &c.value;
            let mut dvalue = &dout * &c.attention;
            let ddilated = b.pw.backward(ws, &c.dilated, &dattention, grads)?;
            dvalue += &b.dwd.backward(ws, &c.value, &ddilated, grads)?;
            parts.push(b.dw.backward(ws, &c.input, &dvalue, grads)?);
        }
        Ok(dy + &nn::concat_channels(&parts))
    }
}

/// Squeeze-and-excitation channel attention, the ablation substitute for
/// [`MultiScaleAttention`]: `y = x * sigmoid(W2 relu(W1 mean(x)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAttention {
    pub squeeze: Linear,
    pub excite: Linear,
}

#[derive(Debug, Clone)]
pub struct ChannelAttentionCache {
    input: Array4<f64>,
    pooled: Array2<f64>,
    hidden_pre: Array2<f64>,
    hidden: Array2<f64>,
    scale: Array2<f64>,
}

impl ChannelAttention {
    pub fn new(name: &str, channels: usize) -> Self {
        let hidden = (channels / 4).max(1);
        ChannelAttention {
            squeeze: Linear::new(format!("{name}.squeeze"), channels, hidden),
            excite: Linear::new(format!("{name}.excite"), hidden, channels),
        }
    }

    pub fn params(&self) -> Vec<ParamSpec> {
        let mut p = self.squeeze.params();
        p.extend(self.excite.params());
        p
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.squeeze.macs() + self.excite.macs() + (self.excite.out_features * h * w) as u64
    }

    pub fn forward(
        &self,
        ws: &WeightStore,
        x: &Array4<f64>,
    ) -> Result<(Array4<f64>, ChannelAttentionCache)> {
        let pooled = nn::global_avg_pool(x);
        let hidden_pre = self.squeeze.forward(ws, &pooled)?;
        let hidden = hidden_pre.mapv(|v| v.max(0.0));
        let scale = self.excite.forward(ws, &hidden)?.mapv(nn::sigmoid);
        let y = nn::scale_channels(x, &scale);
        Ok((
            y,
            ChannelAttentionCache {
                input: x.clone(),
                pooled,
                hidden_pre,
                hidden,
                scale,
            },
        ))
    }

    pub fn backward(
        &self,
        ws: &WeightStore,
        cache: &ChannelAttentionCache,
        dy: &Array4<f64>,
        grads: &mut WeightStore,
    ) -> Result<Array4<f64>> {
        let (_, _, h, w) = dy.dim();
        let mut dscale = nn::spatial_dot(dy, &cache.input);
        dscale.zip_mut_with(&cache.scale, |d, s| *d *= s * (1.0 - s));
        let mut dhidden = self.excite.backward(ws, &cache.hidden, &dscale, grads)?;
        dhidden.zip_mut_with(&cache.hidden_pre, |d, v| {
            if *v <= 0.0 {
                *d = 0.0
            }
        });
        let dpooled = self.squeeze.backward(ws, &cache.pooled, &dhidden, grads)?;
        Ok(nn::scale_channels(dy, &cache.scale) + nn::global_avg_pool_backward(&dpooled, h, w))
    }
}

/// Local attention used in each encoder stage.
#[derive(Debug, Clone, PartialEq)]
pub enum LocalAttention {
    MultiScale(MultiScaleAttention),
    Channel(ChannelAttention),
}

#[derive(Debug, Clone)]
pub enum LocalAttentionCache {
    MultiScale(AttentionCache),
    Channel(ChannelAttentionCache),
}

impl LocalAttention {
    fn params(&self) -> Vec<ParamSpec> {
        match self {
            LocalAttention::MultiScale(m) => m.params(),
            LocalAttention::Channel(c) => c.params(),
        }
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        match self {
            LocalAttention::MultiScale(m) => m.macs(h, w),
            LocalAttention::Channel(c) => c.macs(h, w),
        }
    }

    fn forward(
        &self,
        ws: &WeightStore,
        x: &Array4<f64>,
    ) -> Result<(Array4<f64>, LocalAttentionCache)> {
        Ok(match self {
            LocalAttention::MultiScale(m) => {
                let (y, c) = m.forward(ws, x)?;
                (y, LocalAttentionCache::MultiScale(c))
            }
            LocalAttention::Channel(ca) => {
                let (y, c) = ca.forward(ws, x)?;
                (y, LocalAttentionCache::Channel(c))
            }
        })
    }

    fn backward(
        &self,
        ws: &WeightStore,
        cache: &LocalAttentionCache,
        dy: &Array4<f64>,
        grads: &mut WeightStore,
    ) -> Result<Array4<f64>> {
        match (self, cache) {
            (LocalAttention::MultiScale(m), LocalAttentionCache::MultiScale(c)) => {
                m.backward(ws, c, dy, grads)
            }
            (LocalAttention::Channel(a), LocalAttentionCache::Channel(c)) => {
                a.backward(ws, c, dy, grads)
            }
            _ => Err(Error::Shape("attention cache does not match layer".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStage {
    pub down: Conv2d,
    pub fourier: Option<FourierGate>,
    pub attention: Option<LocalAttention>,
}

/// Stem conv, `S` stages of `[stride-2 conv, Fourier gate, local attention]`,
/// global average pooling and a linear projection to the condition width.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionNet {
    pub stem: Conv2d,
    pub stages: Vec<EncoderStage>,
    pub head: Linear,
}

#[derive(Debug, Clone)]
pub struct ConditionCache {
    input: Array4<f64>,
    stem_pre: Array4<f64>,
    stages: Vec<StageCache>,
    last: Array4<f64>,
    pooled: Array2<f64>,
}

#[derive(Debug, Clone)]
struct StageCache {
    input: Array4<f64>,
    down_pre: Array4<f64>,
    fourier: Option<FourierGateCache>,
    attention: Option<LocalAttentionCache>,
}

impl ConditionNet {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let width = cfg.stem_width;
        let mut stages = Vec::with_capacity(cfg.stages);
        for s in 0..cfg.stages {
            let name = format!("cond.stage{s}");
            let attention = if cfg.toggles.use_mcam {
                Some(LocalAttention::MultiScale(MultiScaleAttention::new(
                    &format!("{name}.mcam"),
                    width,
                    cfg.mcam_scales,
                )?))
            } else if cfg.toggles.substitute_channel_attention {
                Some(LocalAttention::Channel(ChannelAttention::new(
                    &format!("{name}.ca"),
                    width,
                )))
            } else {
                None
            };
            stages.push(EncoderStage {
                down: Conv2d::new(format!("{name}.down"), width, width, 3).with_stride(2),
                fourier: cfg
                    .toggles
                    .use_afgm
                    .then(|| FourierGate::new(&format!("{name}.afgm"), width)),
                attention,
            });
        }
        Ok(ConditionNet {
            stem: Conv2d::new("cond.stem", 3, width, 3),
            stages,
            head: Linear::new("cond.head", width, cfg.condition_width),
        })
    }

    pub fn params(&self) -> Vec<ParamSpec> {
        let mut p = self.stem.params();
        for s in &self.stages {
            p.extend(s.down.params());
            if let Some(f) = &s.fourier {
                p.extend(f.params());
            }
            if let Some(a) = &s.attention {
                p.extend(a.params());
            }
        }
        p.extend(self.head.params());
        p
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let mut total = self.stem.macs(h, w);
        let (mut h, mut w) = self.stem.output_size(h, w);
        for s in &self.stages {
            total += s.down.macs(h, w);
            (h, w) = s.down.output_size(h, w);
            if let Some(f) = &s.fourier {
                total += f.macs(h, w);
            }
            if let Some(a) = &s.attention {
                total += a.macs(h, w);
            }
        }
        total + self.head.macs()
    }

    fn check_size(&self, h: usize, w: usize) -> Result<()> {
        let min = 1usize << self.stages.len();
        if h < min || w < min {
            return Err(Error::TooSmall(format!(
                "conditional network with {} stages needs at least {min}x{min} pixels, got {h}x{w}",
                self.stages.len()
            )));
        }
        Ok(())
    }

    pub fn forward(
        &self,
        ws: &WeightStore,
        x: &Array4<f64>,
    ) -> Result<(Array2<f64>, ConditionCache)> {
        let (_, _, h, w) = x.dim();
        self.check_size(h, w)?;
        let stem_pre = self.stem.forward(ws, x)?;
        let mut feat = nn::leaky_relu(&stem_pre);
        let mut stages = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            let input = feat;
            let down_pre = s.down.forward(ws, &input)?;
            feat = nn::leaky_relu(&down_pre);
            let fourier = match &s.fourier {
                Some(f) => {
                    let (y, c) = f.forward(ws, &feat)?;
                    feat = y;
                    Some(c)
                }
                None => None,
            };
            let attention = match &s.attention {
                Some(a) => {
                    let (y, c) = a.forward(ws, &feat)?;
                    feat = y;
                    Some(c)
                }
                None => None,
            };
            stages.push(StageCache {
                input,
                down_pre,
                fourier,
                attention,
            });
        }
        let pooled = nn::global_avg_pool(&feat);
        let v = self.head.forward(ws, &pooled)?;
        Ok((
            v,
            ConditionCache {
                input: x.clone(),
                stem_pre,
                stages,
                last: feat,
                pooled,
            },
        ))
    }

    /// Gradient w.r.t. the input image given the gradient of the condition vector.
    pub fn backward(
        &self,
        ws: &WeightStore,
        cache: &ConditionCache,
        dv: &Array2<f64>,
        grads: &mut WeightStore,
    ) -> Result<Array4<f64>> {
        let dpooled = self.head.backward(ws, &cache.pooled, dv, grads)?;
        let (_, _, h, w) = cache.last.dim();
        let mut d = nn::global_avg_pool_backward(&dpooled, h, w);
        for (s, c) in self.stages.iter().zip(&cache.stages).rev() {
            if let (Some(a), Some(ac)) = (&s.attention, &c.attention) {
                d = a.backward(ws, ac, &d, grads)?;
            }
            if let (Some(f), Some(fc)) = (&s.fourier, &c.fourier) {
                d = f.backward(ws, fc, &d, grads)?;
            }
            d = nn::leaky_relu_backward(&c.down_pre, &d);
            d = s.down.backward(ws, &c.input, &d, grads)?;
        }
        d = nn::leaky_relu_backward(&cache.stem_pre, &d);
        self.stem.backward(ws, &cache.input, &d, grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};

    fn random(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn(shape, || rng.gen_range(-1.0..1.0))
    }

    fn forced_gate(channels: usize, logit: f64) -> (FourierGate, WeightStore) {
        let gate = FourierGate::new("g", channels);
        let mut ws = WeightStore::initialize(
            &gate.params(),
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(0),
        );
        ws.zero_prefix("g.gate_out.weight");
        ws.insert(
            "g.gate_out.bias",
            ndarray::ArrayD::from_elem(IxDyn(&[channels]), logit),
        );
        (gate, ws)
    }

    fn max_abs_diff(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
        (a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    #[test]
    fn gate_open_doubles_closed_passes_through() {
        let x = random((1, 4, 6, 5), 1);
        let (g, ws) = forced_gate(4, 60.0);
        let (y, _) = g.forward(&ws, &x).unwrap();
        assert!(max_abs_diff(&y, &(&x * 2.0)) < 1e-5);
        let (g, ws) = forced_gate(4, -60.0);
        let (y, _) = g.forward(&ws, &x).unwrap();
        assert!(max_abs_diff(&y, &x) < 1e-5);
    }

    #[test]
    fn constant_input_stays_constant() {
        let gate = FourierGate::new("g", 3);
        let ws = WeightStore::initialize(
            &gate.params(),
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(4),
        );
        let x = Array4::from_shape_fn((1, 3, 5, 7), |(_, c, _, _)| 0.3 + 0.2 * c as f64);
        let (y, _) = gate.forward(&ws, &x).unwrap();
        for c in 0..3usize {
            let plane = y
                .index_axis(ndarray::Axis(0), 0)
                .index_axis_move(ndarray::Axis(0), c);
            let first = plane[[0usize, 0usize]];
            assert!(plane.iter().all(|v| (v - first).abs() < 1e-6));
            // Output is x scaled by 1 + gate(DC).
            assert!(first / x[[0, c, 0, 0]] > 1.0 && first / x[[0, c, 0, 0]] < 2.0);
        }
    }

    #[test]
    fn spectral_round_trip_is_exact() {
        for (h, w) in [(8, 8), (7, 13), (64, 64)] {
            let x = random((1, 2, h, w), 7);
            assert!(max_abs_diff(&ungated_round_trip(&x), &x) < 1e-6);
        }
    }

    #[test]
    fn zero_weight_attention_is_identity() {
        let att = MultiScaleAttention::new("m", 4, DEFAULT_SCALES).unwrap();
        let mut ws = WeightStore::initialize(
            &att.params(),
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(2),
        );
        ws.scale(0.0);
        let x = random((1, 4, 8, 8), 3);
        let (y, _) = att.forward(&ws, &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn identity_kernels_square_the_input() {
        let att = MultiScaleAttention::new("m", 2, DEFAULT_SCALES).unwrap();
        let mut ws = WeightStore::initialize(
            &att.params(),
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(2),
        );
        ws.scale(0.0);
        for (name, arr) in ws.iter_mut() {
            if !name.ends_with(".weight") {
                continue;
            }
            let shape = arr.shape().to_vec();
            let centre = shape[2] / 2;
            for o in 0..shape[0] {
                let i = if shape[1] == 1 { 0 } else { o };
                arr[[o, i, centre, centre]] = 1.0;
            }
        }
        let x = random((1, 2, 4, 4), 5);
        let (y, _) = att.forward(&ws, &x).unwrap();
        // Brute force: each element becomes x * x + x.
        let expect = x.mapv(|v| v * v + v);
        assert!(max_abs_diff(&y, &expect) < 1e-15);
    }

    #[test]
    fn odd_channels_rejected() {
        assert!(MultiScaleAttention::new("m", 5, DEFAULT_SCALES).is_err());
    }

    #[test]
    fn scales_match_nominal_kernels() {
        let [a, b] = DEFAULT_SCALES;
        assert_eq!(
            (a.dw_kernel(), a.dwd_kernel(), a.receptive_field()),
            (5, 7, 23)
        );
        assert_eq!(
            (b.dw_kernel(), b.dwd_kernel(), b.receptive_field()),
            (3, 5, 11)
        );
        assert!(McamScale {
            kernel: 8,
            dilation: 2
        }
        .validate()
        .is_err());
    }

    #[test]
    fn zero_inputs_give_zero_attention_output() {
        let att = MultiScaleAttention::new("m", 4, DEFAULT_SCALES).unwrap();
        let ws = WeightStore::initialize(
            &att.params(),
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(8),
        );
        let (y, _) = att.forward(&ws, &Array4::zeros((1, 4, 6, 6))).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn condition_net_pooling_contract() {
        let cfg = ModelConfig::default();
        let net = ConditionNet::new(&cfg).unwrap();
        let ws = WeightStore::initialize(
            &net.params(),
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(1),
        );
        let small = random((1, 3, 16, 16), 2).mapv(|v| v.abs());
        let big = random((1, 3, 32, 32), 2).mapv(|v| v.abs());
        assert_eq!(
            net.forward(&ws, &small).unwrap().0.dim(),
            (1, cfg.condition_width)
        );
        assert_eq!(
            net.forward(&ws, &big).unwrap().0.dim(),
            (1, cfg.condition_width)
        );
        assert!(matches!(
            net.forward(&ws, &Array4::zeros((1, 3, 4, 16))),
            Err(Error::TooSmall(_))
        ));

        let mut zero = ws.clone();
        zero.scale(0.0);
        let (v, _) = net.forward(&zero, &small).unwrap();
        assert!(v.iter().all(|x| *x == 0.0));
    }
}
