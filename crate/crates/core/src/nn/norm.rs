use ndarray::{s, Array4};

use crate::error::{Error, Result};
use crate::weights::{Init, ParamSpec, WeightStore};

/// Normalization over channel groups and all spatial positions, per image,
/// followed by a learned per-channel affine map.
///
/// `groups == 1` normalizes all channels jointly; `groups == channels` is
/// instance normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupNorm {
    pub name: String,
    pub channels: usize,
    pub groups: usize,
    pub eps: f64,
}

/// Values kept from the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct NormCache {
    normalized: Array4<f64>,
    inv_std: Vec<f64>,
}

impl GroupNorm {
    pub fn new(name: impl Into<String>, channels: usize, groups: usize, eps: f64) -> Self {
        GroupNorm {
            name: name.into(),
            channels,
            groups,
            eps,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn params(&self) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new(self.weight_name(), vec![self.channels], Init::Ones),
            ParamSpec::new(self.bias_name(), vec![self.channels], Init::Zeros),
        ]
    }

    pub fn forward(&self, ws: &WeightStore, x: &Array4<f64>) -> Result<(Array4<f64>, NormCache)> {
        let (n, c, h, w) = x.dim();
        if c != self.channels || c % self.groups != 0 {
            return Err(Error::Shape(format!(
                "{}: expected {} channels in {} groups, got {c}",
                self.name, self.channels, self.groups
            )));
        }
        let gamma = ws.get(&self.weight_name())?;
        let beta = ws.get(&self.bias_name())?;
        let cg = c / self.groups;
        let count = (cg * h * w) as f64;
        let mut normalized = Array4::zeros(x.raw_dim());
        let mut inv_std = Vec::with_capacity(n * self.groups);
        for i in 0..n {
            for g in 0..self.groups {
                let block = x.slice(s![i, g * cg..(g + 1) * cg, .., ..]);
                let mean = block.sum() / count;
                let var = block.fold(0.0, |acc, v| acc + (v - mean) * (v - mean)) / count;
                let is = 1.0 / (var + self.eps).sqrt();
                inv_std.push(is);
                normalized
                    .slice_mut(s![i, g * cg..(g + 1) * cg, .., ..])
                    .zip_mut_with(&block, |o, v| *o = (v - mean) * is);
            }
        }
        let mut y = normalized.clone();
        for ch in 0..c {
            let (gm, bt) = (gamma[ch], beta[ch]);
            y.slice_mut(s![.., ch, .., ..])
                .mapv_inplace(|v| gm * v + bt);
        }
        Ok((
            y,
            NormCache {
                normalized,
                inv_std,
            },
        ))
    }

    pub fn backward(
        &self,
        ws: &WeightStore,
        cache: &NormCache,
        dy: &Array4<f64>,
        grads: &mut WeightStore,
    ) -> Result<Array4<f64>> {
        let gamma = ws.get(&self.weight_name())?;
        let (n, c, h, w) = dy.dim();
        let cg = c / self.groups;
        let count = (cg * h * w) as f64;
        let xhat = &cache.normalized;

        let mut dgamma = ndarray::Array1::<f64>::zeros(c);
        let mut dbeta = ndarray::Array1::<f64>::zeros(c);
        let mut dxhat = dy.clone();
        for ch in 0..c {
            let dys = dy.slice(s![.., ch, .., ..]);
            dgamma[ch] = (&dys * &xhat.slice(s![.., ch, .., ..])).sum();
            dbeta[ch] = dys.sum();
            let gm = gamma[ch];
            dxhat.slice_mut(s![.., ch, .., ..]).mapv_inplace(|v| v * gm);
        }
        let mut dx = Array4::zeros(dy.raw_dim());
        for i in 0..n {
            for g in 0..self.groups {
                let sl = s![i, g * cg..(g + 1) * cg, .., ..];
                let d = dxhat.slice(sl);
                let xh = xhat.slice(sl);
                let sum_d = d.sum();
                let sum_dx = (&d * &xh).sum();
                let is = cache.inv_std[i * self.groups + g];
                let mut out = dx.slice_mut(sl);
                ndarray::Zip::from(&mut out)
                    .and(&d)
                    .and(&xh)
                    .for_each(|o, &dv, &xv| {
                        *o = is * (dv - sum_d / count - xv * sum_dx / count);
                    });
            }
        }
        grads.accumulate(&self.weight_name(), &dgamma.into_dyn());
        grads.accumulate(&self.bias_name(), &dbeta.into_dyn());
        Ok(dx)
    }
}
