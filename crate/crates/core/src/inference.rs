//! Two-phase sampling: optional mask estimation followed by hybrid
//! generation.
//!
//! Mask estimation runs the glyph-conditioned model from pure noise down to
//! `t_early` with an all-ones location mask and the true glyph, then reads a
//! per-pixel mask off the final feature map. Generation starts over from
//! fresh noise and splits the trajectory by the hybrid ratio `r`:
//! `round(r * steps)` glyph-conditioned steps first, then plain base-model
//! steps for the remainder (`r = 1` means every step is glyph-conditioned).

use ndarray::{Array2, Array3, Ix3};
use serde::{Deserialize, Serialize};

use crate::denoiser::{CondTokens, Denoiser};
use crate::diffusion::{ddim_step, NoiseSchedule};
use crate::error::{Error, Result};
use crate::glyph_assets::{
    glyph_channel, glyph_to_latent, mask_to_latent, rasterize_mask, render_glyph, GlyphAtlas,
    QuadRegion,
};
use crate::nn;
use crate::training::{early_phase_features, stack_input, GlyphDrawModel, MaskPredictor};

/// Latent codec. `Identity` works directly in pixel space; `Pool2` halves
/// the spatial resolution (area mean down, nearest-neighbor up).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Codec {
    Identity,
    Pool2,
}

impl Codec {
    pub fn factor(&self) -> usize {
        match self {
            Codec::Identity => 1,
            Codec::Pool2 => 2,
        }
    }

    /// `[c, H, W]` image -> latent.
    pub fn encode(&self, img: &Array3<f64>) -> Result<Array3<f64>> {
        match self {
            Codec::Identity => Ok(img.clone()),
            Codec::Pool2 => {
                let (c, h, w) = img.dim();
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::Shape("pool codec needs even dimensions".into()));
                }
                let mut out = Array3::<f64>::zeros((c, h / 2, w / 2));
                for ci in 0..c {
                    let plane = crate::glyph_assets::area_downsample(
                        &img.index_axis(ndarray::Axis(0), ci).to_owned(),
                        2,
                    )?;
                    out.index_axis_mut(ndarray::Axis(0), ci).assign(&plane);
                }
                Ok(out)
            }
        }
    }

    /// Latent -> `[c, H, W]` image, clamped to `[0, 1]`.
    pub fn decode(&self, latent: &Array3<f64>) -> Array3<f64> {
        let up = match self {
            Codec::Identity => latent.clone(),
            Codec::Pool2 => {
                let (c, h, w) = latent.dim();
                let mut out = Array3::<f64>::zeros((c, h * 2, w * 2));
                for ci in 0..c {
                    for i in 0..h * 2 {
                        for j in 0..w * 2 {
                            out[[ci, i, j]] = latent[[ci, i / 2, j / 2]];
                        }
                    }
                }
                out
            }
        };
        up.mapv(|v| v.clamp(0.0, 1.0))
    }
}

/// Where the location mask for generation comes from.
#[derive(Debug, Clone)]
pub enum MaskSource {
    /// Estimate it with the mask predictor (phase one).
    Predicted,
    /// Rasterize a user-provided quad.
    Quad(QuadRegion),
    /// No spatial constraint.
    AllOnes,
    /// A ready-made latent-resolution mask.
    Given(Array2<f64>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Sampling step count; must equal the schedule's step count.
    pub steps: usize,
    /// Mask-estimation phase stops once t reaches this value.
    pub t_early: usize,
    /// Hybrid ratio: fraction of steps run with the glyph-conditioned model.
    pub r: f64,
    /// DDIM stochasticity; 0 is deterministic.
    pub eta: f64,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn desk_default() -> Self {
        SamplerConfig { steps: 50, t_early: 35, r: 0.5, eta: 0.0, seed: 0 }
    }

    fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.steps != schedule.t_max {
            return Err(Error::Config(format!(
                "sampler steps {} != schedule steps {}",
                self.steps, schedule.t_max
            )));
        }
        if self.t_early == 0 || self.t_early >= self.steps {
            return Err(Error::Config(format!(
                "t_early {} must lie in [1, steps)",
                self.t_early
            )));
        }
        if !(0.0..=1.0).contains(&self.r) {
            return Err(Error::Config(format!("r = {} outside [0, 1]", self.r)));
        }
        let n = self.r * self.steps as f64;
        if (n - n.round()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "r * steps = {n} is not an integer; choose r so the split is exact"
            )));
        }
        Ok(())
    }

    pub fn glyph_steps(&self) -> usize {
        (self.r * self.steps as f64).round() as usize
    }
}

#[derive(Debug, Clone)]
pub struct GenerationRequest {
    /// Full caption fed to the text encoder.
    pub prompt: String,
    /// Text to render; empty means unconstrained generation.
    pub text: String,
    pub mask_source: MaskSource,
}

#[derive(Debug, Clone)]
pub struct GenerationOutput {
    /// Decoded image in `[0, 1]`, `[c, H, W]`.
    pub image: Array3<f64>,
    pub latent: Array3<f64>,
    /// The location mask actually used, at latent resolution.
    pub mask: Array2<f64>,
    pub glyph_latent: Array2<f64>,
    /// Denoiser evaluations by phase.
    pub mask_evals: usize,
    pub glyph_evals: usize,
    pub base_evals: usize,
    pub prompt_truncated: bool,
}

pub struct Sampler<'a> {
    pub model: &'a GlyphDrawModel,
    /// Base model for the tail of the hybrid trajectory; required when r < 1.
    pub base: Option<&'a Denoiser>,
    pub predictor: Option<&'a MaskPredictor>,
    pub schedule: &'a NoiseSchedule,
    pub atlas: &'a GlyphAtlas,
    pub codec: Codec,
}

impl<'a> Sampler<'a> {
    fn pixel_res(&self) -> usize {
        self.model.denoiser.cfg.resolution * self.codec.factor()
    }

    /// Phase one: estimate the location mask for `text`. Empty text returns
    /// the all-ones mask without touching the denoiser. Returns the mask and
    /// the number of denoiser evaluations spent.
    pub fn estimate_mask(
        &self,
        prompt: &str,
        text: &str,
        cfg: &SamplerConfig,
    ) -> Result<(Array2<f64>, usize)> {
        cfg.validate(self.schedule)?;
        let res = self.model.denoiser.cfg.resolution;
        if text.is_empty() {
            return Ok((Array2::ones((res, res)), 0));
        }
        let predictor = self.predictor.ok_or_else(|| {
            Error::Prerequisite("mask estimation requires a trained mask predictor".into())
        })?;
        let (glyph_latent, e_g) = self.glyph_inputs(text)?;
        let e_t = self.model.conditioning.encode_text(prompt).tokens;
        let features = early_phase_features(
            self.model,
            self.schedule,
            &glyph_latent,
            &e_g,
            &e_t,
            cfg.t_early,
            cfg.seed,
        )?;
        Ok((predictor.predict_mask(&features), cfg.steps - cfg.t_early))
    }

    /// Glyph plane at latent resolution plus its embedding.
    fn glyph_inputs(&self, text: &str) -> Result<(Array2<f64>, Array2<f64>)> {
        let res = self.model.denoiser.cfg.resolution;
        let px = self.pixel_res();
        let cond_res = self.model.conditioning.cfg.glyph_res;
        if text.is_empty() {
            return Ok((
                Array2::ones((res, res)),
                self.model.conditioning.no_text_glyph_embedding().tokens,
            ));
        }
        let plane = render_glyph(text, (px, px), self.atlas)?;
        let glyph_latent = glyph_to_latent(&plane, self.codec.factor())?.pixels;
        let for_encoder = render_glyph(text, (cond_res, cond_res), self.atlas)?;
        let e_g = self.model.conditioning.encode_glyph(&for_encoder)?.tokens;
        Ok((glyph_latent, e_g))
    }

    fn resolve_mask(
        &self,
        req: &GenerationRequest,
        cfg: &SamplerConfig,
    ) -> Result<(Array2<f64>, usize)> {
        let res = self.model.denoiser.cfg.resolution;
        match &req.mask_source {
            MaskSource::AllOnes => Ok((Array2::ones((res, res)), 0)),
            MaskSource::Given(m) => {
                if m.dim() != (res, res) {
                    return Err(Error::Shape(format!(
                        "given mask is {:?}, latent resolution is {res}",
                        m.dim()
                    )));
                }
                Ok((m.clone(), 0))
            }
            MaskSource::Quad(q) => {
                let px = self.pixel_res();
                let pixel_mask = rasterize_mask(q, (px, px))?;
                Ok((mask_to_latent(&pixel_mask, self.codec.factor())?.pixels, 0))
            }
            MaskSource::Predicted => self.estimate_mask(&req.prompt, &req.text, cfg),
        }
    }

    /// Phase two: full hybrid generation from fresh noise.
    pub fn generate(&self, req: &GenerationRequest, cfg: &SamplerConfig) -> Result<GenerationOutput> {
        cfg.validate(self.schedule)?;
        let n_glyph = cfg.glyph_steps();
        if n_glyph < cfg.steps && self.base.is_none() {
            return Err(Error::Prerequisite(
                "r < 1 needs a base model for the unconditioned steps".into(),
            ));
        }
        if let Some(base) = self.base {
            if base.cfg.latent_channels != self.model.denoiser.cfg.latent_channels
                || base.cfg.resolution != self.model.denoiser.cfg.resolution
            {
                return Err(Error::Config("base and glyph models disagree on latent shape".into()));
            }
        }
        let (mask, mask_evals) = self.resolve_mask(req, cfg)?;
        let (_, e_g) = self.glyph_inputs(&req.text)?;
        // composite the glyph block into the resolved mask so the input
        // channel is spatially aligned with where the text must appear
        let glyph_latent = glyph_channel(&req.text, &mask, self.atlas)?;
        let enc = self.model.conditioning.encode_text(&req.prompt);
        let e_t = enc.tokens.clone();
        let cond = self
            .model
            .conditioning
            .fuse(
                &crate::conditioning::GlyphEmbedding { tokens: e_g },
                &crate::conditioning::TextEmbedding { tokens: e_t.clone(), truncated: enc.truncated },
            )?
            .fused;

        let ucfg = &self.model.denoiser.cfg;
        let (c, res) = (ucfg.latent_channels, ucfg.resolution);
        let mut rng = nn::seeded_rng(cfg.seed, 4_000_000);
        let mut z = nn::randn(&mut rng, &[c, res, res], 1.0)
            .into_dimensionality::<Ix3>()
            .unwrap();
        let mut glyph_evals = 0usize;
        let mut base_evals = 0usize;
        for (i, t) in (1..=cfg.steps).rev().enumerate() {
            let ab = self.schedule.alpha_bar_at(t)?;
            let eps_hat = if i < n_glyph {
                glyph_evals += 1;
                let input = stack_input(&z, &glyph_latent, &mask, 1.0 - ab);
                self.model
                    .denoiser
                    .predict_noise(&input, t, ab, &cond, CondTokens::All)?
                    .0
            } else {
                base_evals += 1;
                self.base
                    .expect("checked above")
                    .predict_noise(&z, t, ab, &e_t, CondTokens::All)?
                    .0
            };
            let noise = if cfg.eta > 0.0 && t > 1 {
                Some(
                    nn::randn(&mut rng, &[c, res, res], 1.0)
                        .into_dimensionality::<Ix3>()
                        .unwrap(),
                )
            } else {
                None
            };
            z = ddim_step(self.schedule, &z, &eps_hat, t, t - 1, cfg.eta, noise.as_ref())?;
        }
        Ok(GenerationOutput {
            image: self.codec.decode(&z),
            latent: z,
            mask,
            glyph_latent,
            mask_evals,
            glyph_evals,
            base_evals,
            prompt_truncated: enc.truncated,
        })
    }
}
