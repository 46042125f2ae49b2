//! Architecture configuration and the combined conditional + primary model.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conditional::{ConditionCache, ConditionNet, McamScale, DEFAULT_SCALES};
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::primary::{PrimaryCache, PrimaryNet};
use crate::weights::{ParamSpec, WeightMeta, WeightStore};

/// Module switches covering every ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toggles {
    pub use_tfe: bool,
    pub use_afgm: bool,
    pub use_mcam: bool,
    pub substitute_instance_norm: bool,
    pub substitute_channel_attention: bool,
}

impl Toggles {
    pub const FULL: Toggles = Toggles {
        use_tfe: true,
        use_afgm: true,
        use_mcam: true,
        substitute_instance_norm: false,
        substitute_channel_attention: false,
    };
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles::FULL
    }
}

/// The seven ablation rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationSetting {
    /// Baseline: plain 1x1 layers, plain strided encoder.
    S1,
    /// Baseline plus TFE.
    Tfe,
    /// Baseline plus instance normalization.
    InstanceNorm,
    TfeAfgm,
    TfeMcam,
    /// TFE with channel attention in place of the multi-scale attention.
    TfeChannelAttention,
    Full,
}

impl AblationSetting {
    pub const ALL: [AblationSetting; 7] = [
        AblationSetting::S1,
        AblationSetting::Tfe,
        AblationSetting::InstanceNorm,
        AblationSetting::TfeAfgm,
        AblationSetting::TfeMcam,
        AblationSetting::TfeChannelAttention,
        AblationSetting::Full,
    ];

    pub fn toggles(self) -> Toggles {
        let none = Toggles {
            use_tfe: false,
            use_afgm: false,
            use_mcam: false,
            substitute_instance_norm: false,
            substitute_channel_attention: false,
        };
        match self {
            AblationSetting::S1 => none,
            AblationSetting::Tfe => Toggles {
                use_tfe: true,
                ..none
            },
            AblationSetting::InstanceNorm => Toggles {
                substitute_instance_norm: true,
                ..none
            },
            AblationSetting::TfeAfgm => Toggles {
                use_tfe: true,
                use_afgm: true,
                ..none
            },
            AblationSetting::TfeMcam => Toggles {
                use_tfe: true,
                use_mcam: true,
                ..none
            },
            AblationSetting::TfeChannelAttention => Toggles {
                use_tfe: true,
                substitute_channel_attention: true,
                ..none
            },
            AblationSetting::Full => Toggles::FULL,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AblationSetting::S1 => "S1",
            AblationSetting::Tfe => "S1+TFE",
            AblationSetting::InstanceNorm => "S1+IN",
            AblationSetting::TfeAfgm => "S1+TFE+AFGM",
            AblationSetting::TfeMcam => "S1+TFE+MCAM",
            AblationSetting::TfeChannelAttention => "S1+TFE+CA",
            AblationSetting::Full => "full",
        }
    }
}

impl fmt::Display for AblationSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for AblationSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace(['-', ' '], "_");
        Ok(match norm.as_str() {
            "s1" | "i" => AblationSetting::S1,
            "tfe" | "ii" | "s1+tfe" => AblationSetting::Tfe,
            "instance_norm" | "in" | "iii" | "s1+in" => AblationSetting::InstanceNorm,
            "tfe_afgm" | "iv" | "s1+tfe+afgm" => AblationSetting::TfeAfgm,
            "tfe_mcam" | "v" | "s1+tfe+mcam" => AblationSetting::TfeMcam,
            "tfe_channel_attention" | "tfe_ca" | "vi" | "s1+tfe+ca" => {
                AblationSetting::TfeChannelAttention
            }
            "full" | "vii" => AblationSetting::Full,
            _ => return Err(Error::Config(format!("unknown ablation setting `{s}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of modulated primary layers `N`.
    pub primary_layers: usize,
    pub primary_width: usize,
    /// Length `D` of the condition vector.
    pub condition_width: usize,
    /// Downsampling stages `S` of the conditional network.
    pub stages: usize,
    pub stem_width: usize,
    pub mcam_scales: [McamScale; 2],
    pub toggles: Toggles,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            primary_layers: 3,
            primary_width: 48,
            condition_width: 32,
            stages: 3,
            stem_width: 16,
            mcam_scales: DEFAULT_SCALES,
            toggles: Toggles::FULL,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Smallest configuration exercising every module: one layer of width 6,
    /// `D = 4`, one stage of width 4.
    pub fn tiny() -> Self {
        ModelConfig {
            primary_layers: 1,
            primary_width: 6,
            condition_width: 4,
            stages: 1,
            stem_width: 4,
            ..ModelConfig::default()
        }
    }

    pub fn with_setting(mut self, setting: AblationSetting) -> Self {
        self.toggles = setting.toggles();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.toggles;
        if self.primary_layers == 0 {
            return Err(Error::Config("primary_layers must be at least 1".into()));
        }
        if self.primary_width == 0 || self.primary_width % 3 != 0 {
            return Err(Error::Config(format!(
                "primary_width must be a positive multiple of 3, got {}",
                self.primary_width
            )));
        }
        if self.condition_width == 0 || self.stem_width == 0 {
            return Err(Error::Config(
                "condition_width and stem_width must be positive".into(),
            ));
        }
        if t.use_tfe && t.substitute_instance_norm {
            return Err(Error::Config(
                "use_tfe and substitute_instance_norm are mutually exclusive".into(),
            ));
        }
        if t.use_mcam && t.substitute_channel_attention {
            return Err(Error::Config(
                "use_mcam and substitute_channel_attention are mutually exclusive".into(),
            ));
        }
        if t.use_mcam {
            if self.stem_width % 2 != 0 {
                return Err(Error::Config(format!(
                    "multi-scale attention needs an even stem_width, got {}",
                    self.stem_width
                )));
            }
            for s in &self.mcam_scales {
                s.validate()?;
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex_digest(json.as_bytes())
    }

    /// Smallest image side accepted by the conditional network.
    pub fn min_size(&self) -> usize {
        1 << self.stages
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Conditional network feeding the primary network.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub condition: ConditionNet,
    pub primary: PrimaryNet,
}

#[derive(Debug, Clone)]
pub struct ModelCache {
    pub condition: ConditionCache,
    pub vector: Array2<f64>,
    pub primary: PrimaryCache,
}

impl Model {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Model {
            config: config.clone(),
            condition: ConditionNet::new(config)?,
            primary: PrimaryNet::new(config)?,
        })
    }

    /// Every parameter of both networks, conditional first.
    pub fn params(&self) -> Vec<ParamSpec> {
        let mut p = self.condition.params();
        p.extend(self.primary.params());
        p
    }

    /// Fresh weights drawn from the configured seed.
    pub fn init_weights(&self) -> WeightStore {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut ws = WeightStore::initialize(&self.params(), &mut rng);
        ws.meta = WeightMeta {
            config_hash: self.config.hash(),
            seed: self.config.seed,
        };
        ws
    }

    /// Checks that `ws` holds exactly this architecture's parameters.
    pub fn check_weights(&self, ws: &WeightStore) -> Result<()> {
        ws.check_against(&self.params())
    }

    pub fn forward(&self, ws: &WeightStore, x: &Array4<f64>) -> Result<(Array4<f64>, ModelCache)> {
        let (vector, condition) = self.condition.forward(ws, x)?;
        let (y, primary) = self.primary.forward(ws, x, &vector)?;
        Ok((
            y,
            ModelCache {
                condition,
                vector,
                primary,
            },
        ))
    }

    /// Condition vectors `(N, D)` for a batch.
    pub fn condition_vector(&self, ws: &WeightStore, x: &Array4<f64>) -> Result<Array2<f64>> {
        Ok(self.condition.forward(ws, x)?.0)
    }

    /// Enhances every image of the batch; keeps no activations.
    pub fn enhance(&self, ws: &WeightStore, img: &ImageTensor) -> Result<ImageTensor> {
        let v = self.condition_vector(ws, img.data())?;
        let y = self.primary.infer(ws, img.data(), &v)?;
        ImageTensor::from_clamped(y)
    }

    /// Input gradient; parameter gradients are accumulated into `grads`.
    pub fn backward(
        &self,
        ws: &WeightStore,
        cache: &ModelCache,
        dy: &Array4<f64>,
        grads: &mut WeightStore,
    ) -> Result<Array4<f64>> {
        let (dx, dv) = self.primary.backward(ws, &cache.primary, dy, grads)?;
        Ok(dx + self.condition.backward(ws, &cache.condition, &dv, grads)?)
    }
}

/// Exact number of scalar weights of both networks.
pub fn count_params(cfg: &ModelConfig) -> Result<usize> {
    Ok(Model::new(cfg)?.params().iter().map(ParamSpec::numel).sum())
}

/// Multiply-accumulates for one `h x w` image. Convolutions count
/// `C_in C_out k^2 H_out W_out / groups`; each 2-D FFT counts
/// `5 H W log2(H W)` and the Fourier gate runs one forward and one inverse
/// transform per channel; elementwise products count one per element.
pub fn count_flops(cfg: &ModelConfig, h: usize, w: usize) -> Result<u64> {
    let m = Model::new(cfg)?;
    Ok(m.condition.macs(h, w) + m.primary.macs(h, w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_budget_and_monotone_counts() {
        let full = count_params(&ModelConfig::default()).unwrap();
        assert!(full <= 150_000, "{full}");
        let no_mcam = ModelConfig {
            toggles: Toggles {
                use_mcam: false,
                ..Toggles::FULL
            },
            ..ModelConfig::default()
        };
        assert!(count_params(&no_mcam).unwrap() < full);
    }

    #[test]
    fn init_matches_param_count() {
        for s in AblationSetting::ALL {
            let cfg = ModelConfig::default().with_setting(s);
            let m = Model::new(&cfg).unwrap();
            assert_eq!(m.init_weights().numel(), count_params(&cfg).unwrap(), "{s}");
        }
    }

    #[test]
    fn conflicting_toggles_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.toggles.substitute_instance_norm = true;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ModelConfig::default();
        cfg.primary_width = 10;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_tracks_config() {
        let a = ModelConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn settings_parse() {
        for s in AblationSetting::ALL {
            assert_eq!(s.label().parse::<AblationSetting>().unwrap(), s);
        }
    }
}
