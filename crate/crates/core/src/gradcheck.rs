//! Central finite-difference checks of every hand-written backward pass.
//!
//! Each check builds a small layer, draws weights and inputs from a seeded
//! stream, reduces the output to a scalar with a fixed random projection, and
//! compares the analytic gradient of every parameter group (and of the
//! inputs) against `(f(w + h) - f(w - h)) / 2h`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array4, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::conditional::{FourierGate, MultiScaleAttention, DEFAULT_SCALES};
use crate::error::{Error, Result};
use crate::losses::{self, FeatureExtractor, LossConfig, EXTRACTOR_SEED};
use crate::model::{Model, ModelConfig};
use crate::primary::{PrimaryNet, TfeBlock};
use crate::weights::{Init, ParamSpec, WeightStore};

pub const STEP: f64 = 1e-4;
pub const MODULE_TOLERANCE: f64 = 1e-4;
pub const CHARBONNIER_TOLERANCE: f64 = 1e-5;
pub const FULL_TOLERANCE: f64 = 1e-3;
/// Inputs are redrawn until every leaky relu input is at least this far
/// from zero, so that no finite-difference probe straddles the kink.
pub const KINK_MARGIN: f64 = 1e-3;
pub const MAX_DRAWS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Afgm,
    Mcam,
    Tfe,
    Gsm,
    Losses,
    Full,
}

impl Scope {
    pub const ALL: [Scope; 6] = [
        Scope::Afgm,
        Scope::Mcam,
        Scope::Tfe,
        Scope::Gsm,
        Scope::Losses,
        Scope::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Afgm => "afgm",
            Scope::Mcam => "mcam",
            Scope::Tfe => "tfe",
            Scope::Gsm => "gsm",
            Scope::Losses => "losses",
            Scope::Full => "full",
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scope::ALL
            .into_iter()
            .find(|sc| sc.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown gradient-check scope `{s}`")))
    }
}

/// Relative error of one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupError {
    pub name: String,
    pub numel: usize,
    pub rel_error: f64,
    pub tolerance: f64,
}

impl GroupError {
    pub fn passed(&self) -> bool {
        self.rel_error < self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub scope: Scope,
    pub groups: Vec<GroupError>,
}

impl GradReport {
    pub fn max_error(&self) -> f64 {
        self.groups.iter().map(|g| g.rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.groups.iter().all(GroupError::passed)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("scope {}\n", self.scope);
        for g in &self.groups {
            out.push_str(&format!(
                "  {:<44} n={:<5} rel_err={:.3e} tol={:.0e} {}\n",
                g.name,
                g.numel,
                g.rel_error,
                g.tolerance,
                if g.passed() { "ok" } else { "FAIL" }
            ));
        }
        out.push_str(&format!(
            "  max {:.3e} -> {}\n",
            self.max_error(),
            if self.passed() { "pass" } else { "fail" }
        ));
        out
    }
}

/// `||a - n|| / max(||a||, ||n||)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-300 {
        0.0
    } else {
        diff / denom
    }
}

fn central_difference(
    values: &mut ArrayD<f64>,
    mut f: impl FnMut(&ArrayD<f64>) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(values.len());
    for i in 0..values.len() {
        let orig = values.as_slice_mut().expect("standard layout")[i];
        values.as_slice_mut().expect("standard layout")[i] = orig + STEP;
        let plus = f(values)?;
        values.as_slice_mut().expect("standard layout")[i] = orig - STEP;
        let minus = f(values)?;
        values.as_slice_mut().expect("standard layout")[i] = orig;
        out.push((plus - minus) / (2.0 * STEP));
    }
    Ok(out)
}

/// Checks every parameter in `ws` against `grads`.
fn check_params(
    ws: &WeightStore,
    grads: &WeightStore,
    tolerance: f64,
    loss: &dyn Fn(&WeightStore) -> Result<f64>,
) -> Result<Vec<GroupError>> {
    let mut out = Vec::new();
    let mut probe = ws.clone();
    for name in ws.names().cloned().collect::<Vec<_>>() {
        let mut values = probe.get(&name)?.as_standard_layout().into_owned();
        let numeric = central_difference(&mut values, |v| {
            let mut w = probe.clone();
            w.insert(name.clone(), v.clone());
            loss(&w)
        })?;
        probe.insert(name.clone(), values.clone());
        let analytic: Vec<f64> = match grads.get(&name) {
            Ok(g) => g.iter().copied().collect(),
            Err(_) => vec![0.0; values.len()],
        };
        out.push(GroupError {
            name,
            numel: values.len(),
            rel_error: relative_error(&analytic, &numeric),
            tolerance,
        });
    }
    Ok(out)
}

fn check_input(
    name: &str,
    x: &Array4<f64>,
    analytic: &Array4<f64>,
    tolerance: f64,
    loss: &dyn Fn(&Array4<f64>) -> Result<f64>,
) -> Result<GroupError> {
    let mut values = x.clone().into_dyn();
    let numeric = central_difference(&mut values, |v| {
        let v4 = v.clone().into_dimensionality().expect("rank 4");
        loss(&v4)
    })?;
    let a: Vec<f64> = analytic.iter().copied().collect();
    Ok(GroupError {
        name: name.to_string(),
        numel: a.len(),
        rel_error: relative_error(&a, &numeric),
        tolerance,
    })
}

/// Weights with every parameter away from its structural initial value, so
/// that no gradient path is switched off by a zero.
pub fn perturbed_weights(specs: &[ParamSpec], rng: &mut ChaCha8Rng) -> WeightStore {
    let mut ws = WeightStore::initialize(specs, rng);
    for spec in specs {
        let arr = ws.get_mut(&spec.name).expect("just initialized");
        match spec.init {
            Init::Zeros | Init::Small => arr.mapv_inplace(|_| rng.gen_range(-0.1..0.1)),
            Init::Ones => arr.mapv_inplace(|_| 1.0 + rng.gen_range(-0.1..0.1)),
            Init::FanIn(_) => {}
        }
    }
    ws
}

fn random4(
    shape: (usize, usize, usize, usize),
    lo: f64,
    hi: f64,
    rng: &mut ChaCha8Rng,
) -> Array4<f64> {
    Array4::from_shape_simple_fn(shape, || rng.gen_range(lo..hi))
}

fn project(y: &Array4<f64>, r: &Array4<f64>) -> f64 {
    (y * r).sum()
}

fn check_afgm(rng: &mut ChaCha8Rng) -> Result<Vec<GroupError>> {
    let layer = FourierGate::new("afgm", 4);
    let ws = perturbed_weights(&layer.params(), rng);
    let x = random4((1, 4, 8, 8), -1.0, 1.0, rng);
    let r = random4((1, 4, 8, 8), -1.0, 1.0, rng);
    let (_, cache) = layer.forward(&ws, &x)?;
    let mut grads = WeightStore::new();
    let dx = layer.backward(&ws, &cache, &r, &mut grads)?;
    let mut out = check_params(&ws, &grads, MODULE_TOLERANCE, &|w| {
        Ok(project(&layer.forward(w, &x)?.0, &r))
    })?;
    out.push(check_input(
        "afgm.input",
        &x,
        &dx,
        MODULE_TOLERANCE,
        &|xv| Ok(project(&layer.forward(&ws, xv)?.0, &r)),
    )?);
    Ok(out)
}

fn check_mcam(rng: &mut ChaCha8Rng) -> Result<Vec<GroupError>> {
    let layer = MultiScaleAttention::new("mcam", 4, DEFAULT_SCALES)?;
    let ws = perturbed_weights(&layer.params(), rng);
    let x = random4((1, 4, 8, 8), -1.0, 1.0, rng);
    let r = random4((1, 4, 8, 8), -1.0, 1.0, rng);
    let (_, cache) = layer.forward(&ws, &x)?;
    let mut grads = WeightStore::new();
    let dx = layer.backward(&ws, &cache, &r, &mut grads)?;
    let mut out = check_params(&ws, &grads, MODULE_TOLERANCE, &|w| {
        Ok(project(&layer.forward(w, &x)?.0, &r))
    })?;
    out.push(check_input(
        "mcam.input",
        &x,
        &dx,
        MODULE_TOLERANCE,
        &|xv| Ok(project(&layer.forward(&ws, xv)?.0, &r)),
    )?);
    Ok(out)
}

fn check_tfe(rng: &mut ChaCha8Rng) -> Result<Vec<GroupError>> {
    let layer = TfeBlock::new("tfe", 6)?;
    let mut draw = || -> Result<_> {
        let ws = perturbed_weights(&layer.params(), rng);
        let x = random4((1, 6, 8, 8), -1.0, 1.0, rng);
        let (_, cache) = layer.forward(&ws, &x)?;
        let margin = cache.activation_margin();
        Ok(((ws, x, cache), margin))
    };
    let (ws, x, cache) = smooth_draw(&mut draw)?;
    let r = random4((1, 6, 8, 8), -1.0, 1.0, rng);
    let mut grads = WeightStore::new();
    let dx = layer.backward(&ws, &cache, &r, &mut grads)?;
    let mut out = check_params(&ws, &grads, MODULE_TOLERANCE, &|w| {
        Ok(project(&layer.forward(w, &x)?.0, &r))
    })?;
    out.push(check_input(
        "tfe.input",
        &x,
        &dx,
        MODULE_TOLERANCE,
        &|xv| Ok(project(&layer.forward(&ws, xv)?.0, &r)),
    )?);
    Ok(out)
}

/// First draw whose activation margin reaches [`KINK_MARGIN`], or the
/// widest-margin draw if none does.
fn smooth_draw<T>(draw: &mut dyn FnMut() -> Result<(T, f64)>) -> Result<T> {
    let mut best: Option<(T, f64)> = None;
    for _ in 0..MAX_DRAWS {
        let (d, m) = draw()?;
        if m >= KINK_MARGIN {
            return Ok(d);
        }
        if best.as_ref().map_or(true, |(_, b)| m > *b) {
            best = Some((d, m));
        }
    }
    Ok(best.expect("at least one draw").0)
}

/// Head weights small enough that the output never reaches the clamp.
fn shrink_head(ws: &mut WeightStore, rng: &mut ChaCha8Rng) -> Result<()> {
    for name in ["primary.head.weight", "primary.head.bias"] {
        ws.get_mut(name)?
            .mapv_inplace(|_| rng.gen_range(-0.05..0.05));
    }
    Ok(())
}

/// Primary network path: stem, modulated layer, head, and the condition input.
fn check_gsm(rng: &mut ChaCha8Rng) -> Result<Vec<GroupError>> {
    let cfg = ModelConfig::tiny();
    let net = PrimaryNet::new(&cfg)?;
    let mut draw = || -> Result<_> {
        let mut ws = perturbed_weights(&net.params(), rng);
        shrink_head(&mut ws, rng)?;
        let x = random4((1, 3, 8, 8), 0.3, 0.7, rng);
        let v = Array2::from_shape_simple_fn((1, cfg.condition_width), || rng.gen_range(-1.0..1.0));
        let (_, cache) = net.forward(&ws, &x, &v)?;
        let margin = cache.activation_margin();
        Ok(((ws, x, v, cache), margin))
    };
    let (ws, x, v, cache) = smooth_draw(&mut draw)?;
    let r = random4((1, 3, 8, 8), -1.0, 1.0, rng);
    let mut grads = WeightStore::new();
    let (dx, dv) = net.backward(&ws, &cache, &r, &mut grads)?;
    let mut out = check_params(&ws, &grads, MODULE_TOLERANCE, &|w| {
        Ok(project(&net.forward(w, &x, &v)?.0, &r))
    })?;
    out.push(check_input(
        "primary.input",
        &x,
        &dx,
        MODULE_TOLERANCE,
        &|xv| Ok(project(&net.forward(&ws, xv, &v)?.0, &r)),
    )?);
    let v4 = v
        .clone()
        .into_shape_with_order((1, cfg.condition_width, 1, 1))
        .expect("same size");
    let dv4 = dv
        .into_shape_with_order((1, cfg.condition_width, 1, 1))
        .expect("same size");
    out.push(check_input(
        "primary.condition",
        &v4,
        &dv4,
        MODULE_TOLERANCE,
        &|vv| {
            let v2 = vv
                .clone()
                .into_shape_with_order((1, cfg.condition_width))
                .expect("same size");
            Ok(project(&net.forward(&ws, &x, &v2)?.0, &r))
        },
    )?);
    Ok(out)
}

fn check_losses(rng: &mut ChaCha8Rng) -> Result<Vec<GroupError>> {
    let eps = losses::DEFAULT_EPSILON;
    let x = random4((1, 3, 8, 8), 0.0, 1.0, rng);
    let y = random4((1, 3, 8, 8), 0.0, 1.0, rng);
    let mut out = Vec::new();
    for (name, target) in [("charbonnier", &y), ("charbonnier.at_equality", &x)] {
        let g = losses::charbonnier_grad(&x, target, eps)?;
        out.push(check_input(name, &x, &g, CHARBONNIER_TOLERANCE, &|xv| {
            losses::charbonnier(xv, target, eps)
        })?);
    }
    let f = FeatureExtractor::seeded(EXTRACTOR_SEED);
    let cfg = LossConfig {
        lambda1: 0.0,
        lambda2: 1.0,
        ..LossConfig::default()
    };
    let g = losses::total_loss(&x, &y, &cfg, &f)?.grad;
    out.push(check_input(
        "perceptual",
        &x,
        &g,
        MODULE_TOLERANCE,
        &|xv| losses::perceptual(xv, &y, &f, cfg.perceptual_layers),
    )?);
    let cfg = LossConfig::default();
    let g = losses::total_loss(&x, &y, &cfg, &f)?.grad;
    out.push(check_input("total", &x, &g, MODULE_TOLERANCE, &|xv| {
        Ok(losses::total_loss(xv, &y, &cfg, &f)?.total)
    })?);
    Ok(out)
}

/// Tiny model end to end through the combined loss.
fn check_full(rng: &mut ChaCha8Rng) -> Result<Vec<GroupError>> {
    let cfg = ModelConfig::tiny();
    let model = Model::new(&cfg)?;
    let mut ws = perturbed_weights(&model.params(), rng);
    shrink_head(&mut ws, rng)?;
    let x = random4((1, 3, 8, 8), 0.3, 0.7, rng);
    let y = random4((1, 3, 8, 8), 0.0, 1.0, rng);
    let f = FeatureExtractor::seeded(EXTRACTOR_SEED);
    let lc = LossConfig::default();
    let loss = |w: &WeightStore, xv: &Array4<f64>| -> Result<f64> {
        let (pred, _) = model.forward(w, xv)?;
        Ok(losses::total_loss(&pred, &y, &lc, &f)?.total)
    };
    let (pred, cache) = model.forward(&ws, &x)?;
    let lo = losses::total_loss(&pred, &y, &lc, &f)?;
    let mut grads = WeightStore::new();
    let dx = model.backward(&ws, &cache, &lo.grad, &mut grads)?;
    let mut out = check_params(&ws, &grads, FULL_TOLERANCE, &|w| loss(w, &x))?;
    out.push(check_input(
        "model.input",
        &x,
        &dx,
        FULL_TOLERANCE,
        &|xv| loss(&ws, xv),
    )?);
    Ok(out)
}

/// Runs one scope with weights and data drawn from `seed`.
pub fn run(scope: Scope, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = match scope {
        Scope::Afgm => check_afgm(&mut rng)?,
        Scope::Mcam => check_mcam(&mut rng)?,
        Scope::Tfe => check_tfe(&mut rng)?,
        Scope::Gsm => check_gsm(&mut rng)?,
        Scope::Losses => check_losses(&mut rng)?,
        Scope::Full => check_full(&mut rng)?,
    };
    Ok(GradReport { scope, groups })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_conventions() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0], &[2.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn scope_names_round_trip() {
        for s in Scope::ALL {
            assert_eq!(s.name().parse::<Scope>().unwrap(), s);
        }
        assert!("nope".parse::<Scope>().is_err());
    }

    #[test]
    fn every_scope_passes() {
        for s in Scope::ALL {
            let r = run(s, 7).unwrap();
            assert!(r.passed(), "{}", r.to_text());
        }
    }
}
