use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array4, ArrayView2, ArrayView3, Axis, Ix2};

use crate::error::{Error, Result};
use crate::weights::{Init, ParamSpec, WeightStore};

/// 2-D convolution with symmetric zero padding, optional stride, dilation and groups.
///
/// Weights are stored as `{name}.weight` with shape
/// `(out, in / groups, k, k)` and `{name}.bias` with shape `(out)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub zero_init: bool,
}

impl Conv2d {
    pub fn new(
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    ) -> Self {
        Conv2d {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            dilation: 1,
            groups: 1,
            zero_init: false,
        }
    }

    pub fn pointwise(name: impl Into<String>, in_channels: usize, out_channels: usize) -> Self {
        Self::new(name, in_channels, out_channels, 1)
    }

    /// One filter per channel.
    pub fn depthwise(name: impl Into<String>, channels: usize, kernel: usize) -> Self {
        Conv2d {
            groups: channels,
            ..Self::new(name, channels, channels, kernel)
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn zero_initialized(mut self) -> Self {
        self.zero_init = true;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    fn group_in(&self) -> usize {
        self.in_channels / self.groups
    }

    fn group_out(&self) -> usize {
        self.out_channels / self.groups
    }

    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let span = self.dilation * (self.kernel - 1) + 1;
        let p = self.padding();
        let ho = (h + 2 * p).saturating_sub(span) / self.stride + 1;
        let wo = (w + 2 * p).saturating_sub(span) / self.stride + 1;
        (ho, wo)
    }

    pub fn params(&self) -> Vec<ParamSpec> {
        let fan_in = self.group_in() * self.kernel * self.kernel;
        let init = if self.zero_init {
            Init::Zeros
        } else {
            Init::FanIn(fan_in)
        };
        vec![
            ParamSpec::new(
                self.weight_name(),
                vec![self.out_channels, self.group_in(), self.kernel, self.kernel],
                init,
            ),
            ParamSpec::new(self.bias_name(), vec![self.out_channels], Init::Zeros),
        ]
    }

    /// Multiply-accumulates for one image of size `h x w`.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = self.output_size(h, w);
        (self.out_channels * self.group_in() * self.kernel * self.kernel * ho * wo) as u64
    }

    fn check_input(&self, x: &Array4<f64>) -> Result<()> {
        if x.shape()[1] != self.in_channels {
            return Err(Error::Shape(format!(
                "{}: expected {} input channels, got {}",
                self.name,
                self.in_channels,
                x.shape()[1]
            )));
        }
        Ok(())
    }

    fn weight_matrix<'a>(&self, ws: &'a WeightStore) -> Result<ArrayView2<'a, f64>> {
        let w = ws.get(&self.weight_name())?;
        let expect = [self.out_channels, self.group_in(), self.kernel, self.kernel];
        if w.shape() != expect {
            return Err(Error::Shape(format!(
                "{}: weight shape {:?}, expected {:?}",
                self.name,
                w.shape(),
                expect
            )));
        }
        w.view()
            .into_shape_with_order((
                self.out_channels,
                self.group_in() * self.kernel * self.kernel,
            ))
            .map_err(|e| Error::Shape(e.to_string()))
    }

    fn is_plain_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.groups == 1
    }

    pub fn forward(&self, ws: &WeightStore, x: &Array4<f64>) -> Result<Array4<f64>> {
        self.check_input(x)?;
        let wm = self.weight_matrix(ws)?;
        let bias = ws.get(&self.bias_name())?;
        let (n, _, h, w) = x.dim();
        let (ho, wo) = self.output_size(h, w);
        let x = x.as_standard_layout();
        let mut y = Array4::<f64>::zeros((n, self.out_channels, ho, wo));
        let (gi, go) = (self.group_in(), self.group_out());
        for i in 0..n {
            let xi = x.index_axis(Axis(0), i);
            for g in 0..self.groups {
                let wg = wm.slice(s![g * go..(g + 1) * go, ..]);
                let mut yg = y
                    .slice_mut(s![i, g * go..(g + 1) * go, .., ..])
                    .into_shape_with_order((go, ho * wo))
                    .map_err(|e| Error::Shape(e.to_string()))?;
                if self.is_plain_pointwise() {
                    let xg = xi
                        .to_shape((gi, h * w))
                        .map_err(|e| Error::Shape(e.to_string()))?;
                    general_mat_mul(1.0, &wg, &xg, 0.0, &mut yg);
                } else {
                    let col = self.im2col(xi.slice(s![g * gi..(g + 1) * gi, .., ..]), ho, wo);
                    general_mat_mul(1.0, &wg, &col, 0.0, &mut yg);
                }
            }
            for o in 0..self.out_channels {
                let b = bias[o];
                if b != 0.0 {
                    y.slice_mut(s![i, o, .., ..]).mapv_inplace(|v| v + b);
                }
            }
        }
        Ok(y)
    }

    /// Returns the input gradient and accumulates weight/bias gradients into `grads`.
    pub fn backward(
        &self,
        ws: &WeightStore,
        x: &Array4<f64>,
        dy: &Array4<f64>,
        grads: &mut WeightStore,
    ) -> Result<Array4<f64>> {
        self.check_input(x)?;
        let wm = self.weight_matrix(ws)?;
        let (n, _, h, w) = x.dim();
        let (ho, wo) = self.output_size(h, w);
        if dy.dim() != (n, self.out_channels, ho, wo) {
            return Err(Error::Shape(format!(
                "{}: upstream gradient {:?} does not match output {:?}",
                self.name,
                dy.dim(),
                (n, self.out_channels, ho, wo)
            )));
        }
        let x = x.as_standard_layout();
        let dy = dy.as_standard_layout();
        let (gi, go) = (self.group_in(), self.group_out());
        let k2 = self.kernel * self.kernel;
        let mut dw = Array2::<f64>::zeros((self.out_channels, gi * k2));
        let mut db = ndarray::Array1::<f64>::zeros(self.out_channels);
        let mut dx = Array4::<f64>::zeros((n, self.in_channels, h, w));
        for i in 0..n {
            let xi = x.index_axis(Axis(0), i);
            for g in 0..self.groups {
                let wg = wm.slice(s![g * go..(g + 1) * go, ..]);
                let dyg = dy
                    .slice(s![i, g * go..(g + 1) * go, .., ..])
                    .into_shape_with_order((go, ho * wo))
                    .map_err(|e| Error::Shape(e.to_string()))?;
                let mut dwg = dw.slice_mut(s![g * go..(g + 1) * go, ..]);
                if self.is_plain_pointwise() {
                    let xg = xi
                        .to_shape((gi, h * w))
                        .map_err(|e| Error::Shape(e.to_string()))?;
                    general_mat_mul(1.0, &dyg, &xg.t(), 1.0, &mut dwg);
                    let mut dxg = dx
                        .slice_mut(s![i, .., .., ..])
                        .into_shape_with_order((gi, h * w))
                        .map_err(|e| Error::Shape(e.to_string()))?;
                    general_mat_mul(1.0, &wg.t(), &dyg, 0.0, &mut dxg);
                } else {
                    let col = self.im2col(xi.slice(s![g * gi..(g + 1) * gi, .., ..]), ho, wo);
                    general_mat_mul(1.0, &dyg, &col.t(), 1.0, &mut dwg);
                    let mut dcol = Array2::<f64>::zeros((gi * k2, ho * wo));
                    general_mat_mul(1.0, &wg.t(), &dyg, 0.0, &mut dcol);
                    self.col2im(&dcol, &mut dx, i, g * gi, h, w, ho, wo);
                }
                for (o, row) in dyg.outer_iter().enumerate() {
                    db[g * go + o] += row.sum();
                }
            }
        }
        let dw = dw
            .into_shape_with_order(ndarray::IxDyn(&[
                self.out_channels,
                gi,
                self.kernel,
                self.kernel,
            ]))
            .map_err(|e| Error::Shape(e.to_string()))?;
        grads.accumulate(&self.weight_name(), &dw);
        grads.accumulate(&self.bias_name(), &db.into_dyn());
        Ok(dx)
    }

    fn im2col(&self, x: ArrayView3<f64>, ho: usize, wo: usize) -> Array2<f64> {
        let (c, h, w) = x.dim();
        let k = self.kernel;
        let pad = self.padding() as isize;
        let mut col = Array2::<f64>::zeros((c * k * k, ho * wo));
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().expect("standard layout");
        let cols = col.as_slice_mut().expect("fresh array");
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = ((ci * k + ki) * k + kj) * ho * wo;
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ki * self.dilation) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = ci * h * w + iy as usize * w;
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kj * self.dilation) as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                cols[row + oy * wo + ox] = xs[src + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    #[allow(clippy::too_many_arguments)]
    fn col2im(
        &self,
        dcol: &Array2<f64>,
        dx: &mut Array4<f64>,
        n: usize,
        c0: usize,
        h: usize,
        w: usize,
        ho: usize,
        wo: usize,
    ) {
        let k = self.kernel;
        let pad = self.padding() as isize;
        let c = dcol.shape()[0] / (k * k);
        let dcol = dcol.as_slice().expect("standard layout");
        for ci in 0..c {
            let mut plane = dx.slice_mut(s![n, c0 + ci, .., ..]);
            let plane = plane.as_slice_mut().expect("contiguous plane");
            for ki in 0..k {
                for kj in 0..k {
                    let row = ((ci * k + ki) * k + kj) * ho * wo;
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ki * self.dilation) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = iy as usize * w;
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kj * self.dilation) as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                plane[dst + ix as usize] += dcol[row + oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Fully connected layer on `(N, in)` rows. Weight `(out, in)`, bias `(out)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Linear {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
    pub init: Init,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_features: usize, out_features: usize) -> Self {
        Linear {
            name: name.into(),
            in_features,
            out_features,
            init: Init::FanIn(in_features),
        }
    }

    pub fn with_init(mut self, init: Init) -> Self {
        self.init = init;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn params(&self) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new(
                self.weight_name(),
                vec![self.out_features, self.in_features],
                self.init,
            ),
            ParamSpec::new(self.bias_name(), vec![self.out_features], Init::Zeros),
        ]
    }

    pub fn macs(&self) -> u64 {
        (self.in_features * self.out_features) as u64
    }

    fn weight<'a>(&self, ws: &'a WeightStore) -> Result<ArrayView2<'a, f64>> {
        ws.get(&self.weight_name())?
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|e| Error::Shape(format!("{}: {e}", self.name)))
    }

    pub fn forward(&self, ws: &WeightStore, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.shape()[1] != self.in_features {
            return Err(Error::Shape(format!(
                "{}: expected {} features, got {}",
                self.name,
                self.in_features,
                x.shape()[1]
            )));
        }
        let w = self.weight(ws)?;
        let b = ws.get(&self.bias_name())?;
        let mut y = x.dot(&w.t());
        for mut row in y.outer_iter_mut() {
            row.iter_mut().zip(b.iter()).for_each(|(v, b)| *v += b);
        }
        Ok(y)
    }

    pub fn backward(
        &self,
        ws: &WeightStore,
        x: &Array2<f64>,
        dy: &Array2<f64>,
        grads: &mut WeightStore,
    ) -> Result<Array2<f64>> {
        let w = self.weight(ws)?;
        grads.accumulate(&self.weight_name(), &dy.t().dot(x).into_dyn());
        grads.accumulate(&self.bias_name(), &dy.sum_axis(Axis(0)).into_dyn());
        Ok(dy.dot(&w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;
    use rand::SeedableRng;

    /// Direct-summation convolution, independent of the im2col path.
    fn naive(conv: &Conv2d, ws: &WeightStore, x: &Array4<f64>) -> Array4<f64> {
        let w = ws.get(&conv.weight_name()).unwrap();
        let b = ws.get(&conv.bias_name()).unwrap();
        let (n, _, h, wd) = x.dim();
        let (ho, wo) = conv.output_size(h, wd);
        let (gi, go) = (
            conv.in_channels / conv.groups,
            conv.out_channels / conv.groups,
        );
        let p = conv.padding() as isize;
        Array4::from_shape_fn((n, conv.out_channels, ho, wo), |(i, o, oy, ox)| {
            let g = o / go;
            let mut acc = b[o];
            for ci in 0..gi {
                for ki in 0..conv.kernel {
                    for kj in 0..conv.kernel {
                        let iy = (oy * conv.stride + ki * conv.dilation) as isize - p;
                        let ix = (ox * conv.stride + kj * conv.dilation) as isize - p;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc +=
                                w[[o, ci, ki, kj]] * x[[i, g * gi + ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    fn random_ws(conv: &Conv2d, seed: u64) -> WeightStore {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut ws = WeightStore::initialize(&conv.params(), &mut rng);
        ws.get_mut(&conv.bias_name())
            .unwrap()
            .mapv_inplace(|_| rand::Rng::gen_range(&mut rng, -0.5..0.5));
        ws
    }

    fn random_input(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn(shape, || rand::Rng::gen_range(&mut rng, -1.0..1.0))
    }

    #[test]
    fn matches_direct_summation() {
        let cases = vec![
            Conv2d::new("a", 3, 5, 3),
            Conv2d::new("b", 4, 4, 3).with_stride(2),
            Conv2d::depthwise("c", 4, 5),
            Conv2d::depthwise("d", 2, 3).with_dilation(3),
            Conv2d::pointwise("e", 6, 2),
        ];
        for (i, conv) in cases.iter().enumerate() {
            let ws = random_ws(conv, i as u64);
            let x = random_input((2, conv.in_channels, 7, 9), 100 + i as u64);
            let fast = conv.forward(&ws, &x).unwrap();
            let slow = naive(conv, &ws, &x);
            assert_eq!(fast.dim(), slow.dim(), "{}", conv.name);
            let err = (&fast - &slow).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-12, "{}: {err}", conv.name);
        }
    }

    #[test]
    fn one_by_one_param_and_mac_count() {
        let conv = Conv2d::pointwise("p", 3, 3);
        let n: usize = conv.params().iter().map(|p| p.numel()).sum();
        assert_eq!(n, 12);
        assert_eq!(conv.macs(2, 2), 36);
    }

    #[test]
    fn same_padding_preserves_size() {
        assert_eq!(
            Conv2d::depthwise("x", 1, 7)
                .with_dilation(3)
                .output_size(8, 5),
            (8, 5)
        );
        assert_eq!(
            Conv2d::new("x", 1, 1, 3).with_stride(2).output_size(8, 7),
            (4, 4)
        );
    }

    #[test]
    fn backward_matches_finite_differences() {
        let conv = Conv2d::depthwise("dw", 2, 3).with_dilation(2);
        let ws = random_ws(&conv, 9);
        let x = random_input((1, 2, 5, 6), 10);
        let dy = random_input((1, 2, 5, 6), 11);
        let mut grads = WeightStore::new();
        let dx = conv.backward(&ws, &x, &dy, &mut grads).unwrap();
        let objective =
            |ws: &WeightStore, x: &Array4<f64>| (conv.forward(ws, x).unwrap() * &dy).sum();
        let h = 1e-5;
        for idx in [(0, 0, 0, 0), (0, 1, 2, 3), (0, 1, 4, 5)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (objective(&ws, &xp) - objective(&ws, &xm)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-8, "{fd} vs {}", dx[idx]);
        }
        let gw: &ArrayD<f64> = grads.get("dw.weight").unwrap();
        for idx in [[0, 0, 0, 0], [1, 0, 2, 1]] {
            let mut wp = ws.clone();
            wp.get_mut("dw.weight").unwrap()[idx.as_slice()] += h;
            let mut wm = ws.clone();
            wm.get_mut("dw.weight").unwrap()[idx.as_slice()] -= h;
            let fd = (objective(&wp, &x) - objective(&wm, &x)) / (2.0 * h);
            assert!((fd - gw[idx.as_slice()]).abs() < 1e-8);
        }
    }
}
