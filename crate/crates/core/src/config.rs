//! Experiment configuration and its TOML file form.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dcg::DcgConfig;
use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::objectives::MmdConfig;
use crate::schedule::{NoiseSchedule, PriorCombine};

/// Which modules an experiment trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Variant {
    /// Image encoder and a linear softmax head; no diffusion.
    #[serde(rename = "basic")]
    Basic,
    /// Diffusion with uniform priors.
    #[serde(rename = "C1", alias = "c1")]
    C1,
    /// Diffusion guided by the DCG priors.
    #[serde(rename = "C2", alias = "c2")]
    C2,
    /// C2 plus the MMD regularizer.
    #[default]
    #[serde(rename = "full")]
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Basic, Variant::C1, Variant::C2, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Basic => "basic",
            Variant::C1 => "C1",
            Variant::C2 => "C2",
            Variant::Full => "full",
        }
    }

    pub fn uses_diffusion(self) -> bool {
        self != Variant::Basic
    }

    pub fn uses_dcg(self) -> bool {
        matches!(self, Variant::C2 | Variant::Full)
    }

    pub fn uses_mmd(self) -> bool {
        self == Variant::Full
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "basic" => Ok(Variant::Basic),
            "c1" => Ok(Variant::C1),
            "c2" => Ok(Variant::C2),
            "full" => Ok(Variant::Full),
            _ => Err(Error::Config(format!("unknown variant {s:?} (expected basic, C1, C2 or full)"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    ImageFolder,
    CsvIndex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Image-folder root or CSV index path for the on-disk sources.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub classes: usize,
    pub image_size: usize,
    pub channels: usize,
    pub count: usize,
    pub noise_sigma: f64,
    pub blur_radius: f64,
    pub imbalance: Vec<f64>,
    /// Seeds synthesis and the train/test split; independent of the run seed.
    pub data_seed: u64,
    pub train_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub inference_steps: usize,
    #[serde(default)]
    pub prior_combine: PriorCombine,
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr_denoiser: f64,
    pub lr_dcg: f64,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda: f64,
    /// Weight of the DCG cross-entropy during joint training.
    pub ce_weight: f64,
    pub mmd: MmdConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum F1Average {
    #[default]
    Macro,
    Weighted,
}

impl F1Average {
    pub fn name(self) -> &'static str {
        match self {
            F1Average::Macro => "macro",
            F1Average::Weighted => "weighted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Evaluate on the test split every this many joint epochs (and after the last).
    pub every: usize,
    pub votes: usize,
    #[serde(default)]
    pub f1: F1Average,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Variant,
    pub seed: u64,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub dcg: DcgConfig,
    pub optim: OptimConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// CPU-trainable defaults: 4 classes of 64×64 grayscale synthetic images.
    pub fn desk() -> Self {
        Self {
            variant: Variant::Full,
            seed: 0,
            data: DataConfig {
                source: DataSource::Synthetic,
                path: None,
                classes: 4,
                image_size: 64,
                channels: 1,
                count: 2000,
                noise_sigma: 0.15,
                blur_radius: 1.0,
                imbalance: vec![1.0; 4],
                data_seed: 7,
                train_ratio: 0.8,
            },
            schedule: ScheduleConfig {
                timesteps: 1000,
                beta_start: 1e-4,
                beta_end: 0.02,
                inference_steps: 100,
                prior_combine: PriorCombine::Mean,
            },
            denoiser: DenoiserConfig {
                latent_dim: 256,
                encoder_channels: vec![8, 16, 16, 16],
                encoder_strides: vec![2, 2, 2, 1],
            },
            dcg: DcgConfig {
                global_channels: vec![8, 16, 16, 16],
                global_strides: vec![2, 2, 2, 1],
                ..DcgConfig::default()
            },
            optim: OptimConfig {
                lr_denoiser: 1e-3,
                lr_dcg: 2e-4,
                batch_size: 32,
                warmup_epochs: 10,
                epochs: 100,
            },
            loss: LossConfig {
                lambda: 0.5,
                ce_weight: 1.0,
                mmd: MmdConfig::default(),
            },
            eval: EvalConfig {
                every: 10,
                votes: 1,
                f1: F1Average::Macro,
            },
        }
    }

    /// Full-scale settings: 224px inputs, 6144-wide latent, 1000 epochs.
    pub fn full_scale() -> Self {
        let mut c = Self::desk();
        c.data.image_size = 224;
        c.data.channels = 3;
        c.denoiser = DenoiserConfig {
            latent_dim: 6144,
            encoder_channels: vec![64, 128, 256, 512],
            encoder_strides: vec![2, 2, 2, 2],
        };
        c.dcg = DcgConfig {
            global_channels: vec![64, 128, 256, 512],
            global_strides: vec![2, 2, 2, 2],
            local_channels: vec![64, 128, 256],
            local_strides: vec![2, 2, 2],
            ..DcgConfig::default()
        };
        c.optim.epochs = 1000;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        let bad = |m: String| Err(Error::Config(m));
        if d.classes < 2 {
            return bad(format!("data.classes must be at least 2, got {}", d.classes));
        }
        if d.channels == 0 || d.image_size == 0 {
            return bad("data.channels and data.image_size must be positive".into());
        }
        if d.source == DataSource::Synthetic {
            if d.count < d.classes {
                return bad(format!("data.count {} is below the class count {}", d.count, d.classes));
            }
            if d.imbalance.len() != d.classes {
                return bad(format!("data.imbalance needs {} weights, got {}", d.classes, d.imbalance.len()));
            }
            if !(d.noise_sigma >= 0.0 && d.blur_radius >= 0.0) {
                return bad("data.noise_sigma and data.blur_radius must be non-negative".into());
            }
        } else if d.path.is_none() {
            return bad("data.path is required for on-disk sources".into());
        }
        if !(d.train_ratio > 0.0 && d.train_ratio < 1.0) {
            return bad(format!("data.train_ratio must lie in (0, 1), got {}", d.train_ratio));
        }
        self.schedule.build()?;
        let s = &self.schedule;
        if s.inference_steps == 0 || s.inference_steps > s.timesteps {
            return bad(format!(
                "schedule.inference_steps must lie in [1, {}], got {}",
                s.timesteps, s.inference_steps
            ));
        }
        let o = &self.optim;
        if !(o.lr_denoiser > 0.0 && o.lr_dcg > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if o.batch_size < 2 {
            return bad("optim.batch_size must be at least 2".into());
        }
        if !(self.loss.lambda >= 0.0 && self.loss.ce_weight >= 0.0) {
            return bad("loss.lambda and loss.ce_weight must be non-negative".into());
        }
        self.loss.mmd.validate()?;
        if self.denoiser.latent_dim < 2 {
            return bad("denoiser.latent_dim must be at least 2".into());
        }
        if self.dcg.roi_size > d.image_size || self.dcg.roi_count == 0 {
            return bad(format!("dcg.roi_size {} exceeds the image size {}", self.dcg.roi_size, d.image_size));
        }
        if self.eval.every == 0 || self.eval.votes == 0 {
            return bad("eval.every and eval.votes must be positive".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for cfg in [RunConfig::desk(), RunConfig::full_scale()] {
            cfg.validate().unwrap();
            let text = cfg.to_toml().unwrap();
            assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        }
    }

    #[test]
    fn reference_hyperparameters_are_the_defaults() {
        let c = RunConfig::desk();
        assert_eq!(c.optim.lr_denoiser, 1e-3);
        assert_eq!(c.optim.lr_dcg, 2e-4);
        assert_eq!(c.optim.batch_size, 32);
        assert_eq!(c.optim.warmup_epochs, 10);
        assert_eq!(c.loss.lambda, 0.5);
        assert_eq!((c.dcg.roi_count, c.dcg.roi_size), (6, 32));
        assert_eq!((c.schedule.beta_start, c.schedule.beta_end), (1e-4, 0.02));
        assert_eq!(RunConfig::full_scale().denoiser.latent_dim, 6144);
    }

    #[test]
    fn odd_values_round_trip() {
        let mut c = RunConfig::desk();
        c.variant = Variant::C1;
        c.seed = u32::MAX as u64 + 17;
        c.loss.lambda = 0.1 + 0.2;
        c.data.imbalance = vec![0.7, 0.1, 0.1, 1.0 / 3.0];
        c.loss.mmd.bandwidths_sq = vec![1e-7, 3.3];
        c.schedule.prior_combine = PriorCombine::Sum;
        c.data.source = DataSource::CsvIndex;
        c.data.path = Some("some/index.csv".into());
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_invalid_values() {
        let mut c = RunConfig::desk();
        c.optim.lr_dcg = 0.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::desk();
        c.schedule.inference_steps = 2000;
        assert!(c.validate().is_err());
        let mut c = RunConfig::desk();
        c.data.imbalance = vec![1.0; 3];
        assert!(c.validate().is_err());
        let text = RunConfig::desk().to_toml().unwrap().replace("variant = \"full\"", "variant = \"C9\"");
        assert!(matches!(RunConfig::from_toml(&text), Err(Error::Config(_))));
        let text = RunConfig::desk().to_toml().unwrap() + "\nunknown_key = 1\n";
        assert!(RunConfig::from_toml(&text).is_err());
    }

    #[test]
    fn variant_names_parse() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("C3".parse::<Variant>().is_err());
        assert!(Variant::Full.uses_mmd() && !Variant::C2.uses_mmd());
        assert!(Variant::C2.uses_dcg() && !Variant::C1.uses_dcg());
        assert!(!Variant::Basic.uses_diffusion());
    }
}
