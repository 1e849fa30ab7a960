//! Run configuration: one JSON file with a section per module. CLI flags
//! override individual fields; the effective merged config is written next
//! to every command's outputs.

use std::path::{Path, PathBuf};

use glyphdraw::conditioning::ConditioningConfig;
use glyphdraw::denoiser::UNetConfig;
use glyphdraw::diffusion::NoiseSchedule;
use glyphdraw::error::{Error, Result};
use glyphdraw::inference::{Codec, SamplerConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Paths {
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub outputs: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            dataset: PathBuf::from("data/shard"),
            checkpoints: PathBuf::from("checkpoints"),
            outputs: PathBuf::from("outputs"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSection {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// Characters words are drawn from (all must exist in the atlas).
    pub charset: String,
    pub min_word_len: usize,
    pub max_word_len: usize,
    /// Fraction of samples synthesized without any text.
    pub empty_frac: f64,
    pub margin_frac: f64,
    pub max_jitter: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            count: 1000,
            height: 32,
            width: 32,
            charset: "ABCDEFGHIJ".to_string(),
            min_word_len: 1,
            max_word_len: 4,
            empty_frac: 0.3,
            margin_frac: 0.10,
            max_jitter: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleSection {
    pub steps: usize,
    /// Explicit endpoints; when absent the 1000-step-rescaled default is used.
    pub beta_start: Option<f64>,
    pub beta_end: Option<f64>,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection { steps: 50, beta_start: None, beta_end: None }
    }
}

impl ScheduleSection {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match (self.beta_start, self.beta_end) {
            (Some(a), Some(b)) => NoiseSchedule::linear_with(self.steps, a, b),
            (None, None) => NoiseSchedule::linear(self.steps),
            _ => Err(Error::Config("set both beta_start and beta_end or neither".into())),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub lr: f64,
    pub alpha: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr: 1e-3,
            alpha: 0.5,
            batch_size: 4,
            steps: 2000,
            log_every: 25,
            checkpoint_every: 500,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskPredictorSection {
    pub hidden: usize,
    pub steps: usize,
    pub lr: f64,
    /// Number of corpus samples whose early-phase features are cached.
    pub samples: usize,
    /// Fraction of those held out for the IoU report.
    pub holdout_frac: f64,
}

impl Default for MaskPredictorSection {
    fn default() -> Self {
        MaskPredictorSection { hidden: 32, steps: 400, lr: 1e-2, samples: 48, holdout_frac: 0.25 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateSection {
    /// Benchmark size when generating from the spelling benchmark.
    pub generations: usize,
    /// Reference set size for the Fréchet proxy.
    pub reference_images: usize,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection { generations: 200, reference_images: 64 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    /// Run-level seed; mandatory.
    pub seed: u64,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default = "default_conditioning")]
    pub conditioning: ConditioningConfig,
    #[serde(default = "default_unet")]
    pub unet: UNetConfig,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub mask_predictor: MaskPredictorSection,
    #[serde(default = "SamplerConfig::desk_default")]
    pub sampler: SamplerConfig,
    #[serde(default = "default_codec")]
    pub codec: Codec,
    #[serde(default)]
    pub evaluate: EvaluateSection,
}

fn default_conditioning() -> ConditioningConfig {
    ConditioningConfig::desk_default()
}

fn default_unet() -> UNetConfig {
    UNetConfig::desk_default(ConditioningConfig::desk_default().d_c)
}

fn default_codec() -> Codec {
    Codec::Identity
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {path:?}: {e}")))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("malformed config {path:?}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.unet.cond_dim != self.conditioning.d_c {
            return Err(Error::Config(format!(
                "unet.cond_dim {} must equal conditioning.d_c {}",
                self.unet.cond_dim, self.conditioning.d_c
            )));
        }
        if self.sampler.steps != self.schedule.steps {
            return Err(Error::Config(format!(
                "sampler.steps {} must equal schedule.steps {}",
                self.sampler.steps, self.schedule.steps
            )));
        }
        let factor = self.codec.factor();
        if self.dataset.height != self.unet.resolution * factor
            || self.dataset.width != self.unet.resolution * factor
        {
            return Err(Error::Config(format!(
                "dataset {}x{} does not match unet resolution {} at codec factor {}",
                self.dataset.height, self.dataset.width, self.unet.resolution, factor
            )));
        }
        if self.dataset.min_word_len == 0 || self.dataset.min_word_len > self.dataset.max_word_len {
            return Err(Error::Config("word length range is empty".into()));
        }
        Ok(())
    }

    /// Write the effective (merged) config next to a command's outputs.
    pub fn write_effective(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("effective_config.json"),
            serde_json::to_string_pretty(self)?,
        )?;
        Ok(())
    }
}
