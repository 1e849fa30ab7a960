//! Training loops: the parameter partition rule, Adam, glyph-conditioned
//! fine-tuning with the mask-weighted loss, base-model training, and the
//! per-pixel mask predictor.
//!
//! The partition rule freezes everything except the widened input
//! convolution, the fusion module, and the key/value projections of every
//! cross-attention block. Randomness is derived per step from `(seed, step)`
//! so a resumed run replays the exact same batches and noise.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, Ix2, Ix3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::conditioning::{fusion_forward, leaf_params, Conditioning, ConditioningConfig};
use crate::denoiser::{forward, CondTokens, Denoiser, UNetConfig};
use crate::diffusion::{add_noise, ddim_step, loss_gd_weighted_tape, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn;
use crate::tape::{Tape, Var};

// ---------------------------------------------------------------------------
// parameter partition
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Partition {
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
}

/// Split a glyph-conditioned model's parameters into trainable and frozen
/// sets: `conv_in.*`, `fusion.*`, and every `*.cross.w_k` / `*.cross.w_v`
/// train; everything else stays frozen.
pub fn partition_params<V>(params: &BTreeMap<String, V>) -> Result<Partition> {
    let mut trainable = Vec::new();
    let mut frozen = Vec::new();
    for name in params.keys() {
        let is_conv_in = name.starts_with("conv_in.");
        let is_fusion = name.starts_with("fusion.");
        let is_cross_kv = name.ends_with(".cross.w_k") || name.ends_with(".cross.w_v");
        if is_conv_in || is_fusion || is_cross_kv {
            trainable.push(name.clone());
        } else {
            frozen.push(name.clone());
        }
    }
    if trainable.is_empty() {
        return Err(Error::Partition(
            "no trainable parameters matched the partition rule".into(),
        ));
    }
    if !trainable.iter().any(|n| n.ends_with(".cross.w_k")) {
        return Err(Error::Partition(
            "model has no cross-attention key projection; not a conditioned denoiser".into(),
        ));
    }
    Ok(Partition { trainable, frozen })
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with state held only for the parameters it updates.
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: usize,
    pub m: BTreeMap<String, ArrayD<f64>>,
    pub v: BTreeMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Apply one update to `params` in place using `grads`; parameters
    /// without a gradient entry are left untouched.
    pub fn update(
        &mut self,
        params: &mut BTreeMap<String, ArrayD<f64>>,
        grads: &BTreeMap<String, ArrayD<f64>>,
    ) {
        self.step += 1;
        let t = self.step as f64;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        for (name, g) in grads {
            let p = match params.get_mut(name) {
                Some(p) => p,
                None => continue,
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            azip_update(p, g, m, v, c, bc1, bc2);
        }
    }
}

fn azip_update(
    p: &mut ArrayD<f64>,
    g: &ArrayD<f64>,
    m: &mut ArrayD<f64>,
    v: &mut ArrayD<f64>,
    c: &AdamConfig,
    bc1: f64,
    bc2: f64,
) {
    for (((pi, gi), mi), vi) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
        *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
        *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
        let mhat = *mi / bc1;
        let vhat = *vi / bc2;
        *pi -= c.lr * mhat / (vhat.sqrt() + c.eps);
    }
}

// ---------------------------------------------------------------------------
// glyph-conditioned model wrapper
// ---------------------------------------------------------------------------

/// Denoiser plus conditioning, with fusion weights exposed in one flat
/// parameter map so the partition rule and checkpoints see a single model.
pub struct GlyphDrawModel {
    pub denoiser: Denoiser,
    pub conditioning: Conditioning,
}

impl GlyphDrawModel {
    pub fn new(unet: UNetConfig, cond: ConditioningConfig) -> Result<Self> {
        if unet.cond_dim != cond.d_c {
            return Err(Error::Config(format!(
                "denoiser cond_dim {} != conditioning d_c {}",
                unet.cond_dim, cond.d_c
            )));
        }
        if !unet.glyph_conditioned {
            return Err(Error::Config("glyph model needs glyph_conditioned = true".into()));
        }
        Ok(GlyphDrawModel { denoiser: Denoiser::new(unet)?, conditioning: Conditioning::new(cond)? })
    }

    /// Start from a trained base model: base weights are kept bit-for-bit,
    /// conv_in is widened with zeros, fusion starts at identity.
    pub fn from_base(base: &Denoiser, cond: ConditioningConfig) -> Result<Self> {
        if base.cfg.cond_dim != cond.d_c {
            return Err(Error::Config(format!(
                "base cond_dim {} != conditioning d_c {}",
                base.cfg.cond_dim, cond.d_c
            )));
        }
        Ok(GlyphDrawModel {
            denoiser: Denoiser::from_base(base)?,
            conditioning: Conditioning::new(cond)?,
        })
    }

    /// All optimizable tensors: denoiser weights plus `fusion.*`.
    pub fn flat_params(&self) -> BTreeMap<String, ArrayD<f64>> {
        let mut p = self.denoiser.params.clone();
        for (k, v) in &self.conditioning.fusion_params {
            p.insert(k.clone(), v.clone());
        }
        p
    }

    pub fn set_flat_params(&mut self, flat: &BTreeMap<String, ArrayD<f64>>) {
        for (k, v) in flat {
            if k.starts_with("fusion.") {
                self.conditioning.fusion_params.insert(k.clone(), v.clone());
            } else {
                self.denoiser.params.insert(k.clone(), v.clone());
            }
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.denoiser.save(dir)?;
        archive::save_tensors(&self.conditioning.fusion_params, &dir.join("fusion.gdta"))?;
        let json = serde_json::to_string_pretty(&self.conditioning.cfg)?;
        std::fs::write(dir.join("conditioning.json"), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let denoiser = Denoiser::load(dir)?;
        let cfg: ConditioningConfig =
            serde_json::from_str(&std::fs::read_to_string(dir.join("conditioning.json"))?)?;
        let mut conditioning = Conditioning::new(cfg)?;
        conditioning.fusion_params = archive::load_tensors(&dir.join("fusion.gdta"))?;
        Ok(GlyphDrawModel { denoiser, conditioning })
    }
}

// ---------------------------------------------------------------------------
// training examples and steps
// ---------------------------------------------------------------------------

/// One pre-encoded training example at latent resolution.
#[derive(Debug, Clone)]
pub struct TrainExample {
    /// Clean latent, `[c, res, res]`.
    pub z0: Array3<f64>,
    /// Downsampled glyph plane, `[res, res]`.
    pub glyph_latent: Array2<f64>,
    /// Downsampled location mask (1 outside the text region), `[res, res]`.
    pub mask_latent: Array2<f64>,
    /// Frozen glyph embedding, `[L_g, d_c]`.
    pub e_g: Array2<f64>,
    /// Frozen text embedding, `[L_t, d_c]`.
    pub e_t: Array2<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Weight of the masked text-region loss term.
    pub alpha: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: 1e-3, alpha: 0.5, batch_size: 4, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    /// The mask-weighted term alone (already scaled by alpha).
    pub loss_text_term: f64,
    pub lr: f64,
}

/// Stack latent, glyph plane, and mask plane into the denoiser input.
///
/// `hint_scale` fades the two condition planes toward their neutral all-ones
/// state as the latent becomes informative: the planes enter as
/// `1 − hint_scale·(1 − plane)`. Callers pass `1 − ᾱ_t`, the fraction of the
/// clean latent the noisy latent does not pin down. Without this fade a
/// static input convolution faces conflicting optima across noise levels —
/// the hint must be injected at high noise but double-counts the latent's own
/// content at low noise, and the ε-space loss weights the low-noise steps so
/// heavily that the optimizer keeps the hint channels near zero.
pub fn stack_input(
    z: &Array3<f64>,
    glyph: &Array2<f64>,
    mask: &Array2<f64>,
    hint_scale: f64,
) -> Array3<f64> {
    let (c, h, w) = z.dim();
    let mut out = Array3::<f64>::zeros((c + 2, h, w));
    out.slice_mut(ndarray::s![..c, .., ..]).assign(z);
    out.slice_mut(ndarray::s![c, .., ..]).assign(&glyph.mapv(|v| 1.0 - hint_scale * (1.0 - v)));
    out.slice_mut(ndarray::s![c + 1, .., ..]).assign(&mask.mapv(|v| 1.0 - hint_scale * (1.0 - v)));
    out
}

fn inv_mask_planes(mask: &Array2<f64>, c: usize) -> Array3<f64> {
    let (h, w) = mask.dim();
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                out[[ci, i, j]] = 1.0 - mask[[i, j]];
            }
        }
    }
    out
}

/// Gradients for one example through the glyph-conditioned path, pushed
/// into `acc` scaled by `scale`. Returns `(total_loss, text_term)`.
#[allow(clippy::too_many_arguments)]
fn accumulate_example(
    flat: &BTreeMap<String, ArrayD<f64>>,
    cond_cfg: &ConditioningConfig,
    unet_cfg: &UNetConfig,
    schedule: &NoiseSchedule,
    ex: &TrainExample,
    t: usize,
    eps: &Array3<f64>,
    alpha: f64,
    trainable: &[String],
    acc: &mut BTreeMap<String, ArrayD<f64>>,
    scale: f64,
) -> Result<(f64, f64)> {
    let z_t = add_noise(schedule, &ex.z0, t, eps)?;
    let ab = schedule.alpha_bar_at(t)?;
    let input = stack_input(&z_t, &ex.glyph_latent, &ex.mask_latent, 1.0 - ab);

    let mut tape = Tape::new();
    let vars = leaf_params(&mut tape, flat);
    let e_g = tape.leaf2(ex.e_g.clone());
    let e_t = tape.leaf2(ex.e_t.clone());
    let cond = fusion_forward(&mut tape, cond_cfg, &vars, e_g, e_t);
    let zv = tape.leaf(input.into_dyn());
    let (eps_hat, _) = forward(&mut tape, unet_cfg, &vars, zv, t, ab, cond, CondTokens::All)?;
    let eps_v = tape.leaf(eps.clone().into_dyn());
    let inv = tape.leaf(inv_mask_planes(&ex.mask_latent, ex.z0.dim().0).into_dyn());
    let loss = loss_gd_weighted_tape(&mut tape, eps_v, eps_hat, inv, alpha);
    let loss_val = tape.scalar_value(loss);
    if !loss_val.is_finite() {
        return Err(Error::Divergence { step: 0, detail: format!("loss = {loss_val}") });
    }
    // the text term for logging: weighted loss minus the plain mse
    let mse = crate::diffusion::loss_sd(
        eps,
        &tape.value(eps_hat).view().into_dimensionality::<Ix3>().unwrap().to_owned(),
    )?;
    let grads = tape.backward(loss);
    for name in trainable {
        if let Some(g) = &grads[vars[name].0] {
            let entry = acc
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            entry.zip_mut_with(g, |a, b| *a += scale * b);
        }
    }
    Ok((loss_val, loss_val - mse))
}

/// One fine-tuning step over a batch drawn deterministically from
/// `(cfg.seed, step)`: uniform timestep, fresh Gaussian noise, the
/// mask-weighted loss, and an Adam update restricted to the partition's
/// trainable set.
pub fn train_step(
    model: &mut GlyphDrawModel,
    opt: &mut Adam,
    schedule: &NoiseSchedule,
    examples: &[TrainExample],
    step: usize,
    cfg: &TrainConfig,
) -> Result<StepStats> {
    if examples.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let flat = model.flat_params();
    let partition = partition_params(&flat)?;
    let mut rng = nn::seeded_rng(cfg.seed, 1_000_000 + step as u64);
    let mut acc: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
    let mut loss_sum = 0.0;
    let mut text_sum = 0.0;
    let scale = 1.0 / cfg.batch_size as f64;
    for _ in 0..cfg.batch_size {
        let ex = &examples[rng.gen_range(0..examples.len())];
        let t = rng.gen_range(1..=schedule.t_max);
        let eps = nn::randn(&mut rng, &[ex.z0.dim().0, ex.z0.dim().1, ex.z0.dim().2], 1.0)
            .into_dimensionality::<Ix3>()
            .unwrap();
        let (l, lt) = accumulate_example(
            &flat,
            &model.conditioning.cfg,
            &model.denoiser.cfg,
            schedule,
            ex,
            t,
            &eps,
            cfg.alpha,
            &partition.trainable,
            &mut acc,
            scale,
        )
        .map_err(|e| match e {
            Error::Divergence { detail, .. } => Error::Divergence { step, detail },
            other => other,
        })?;
        loss_sum += l * scale;
        text_sum += lt * scale;
    }
    // The latent-channel slice of conv_in.w is kept at its base value: the
    // base model's noise robustness lives there, and letting the weighted
    // text-region loss retune it teaches the input layer to chase noise at
    // high noise levels, which destroys closed-loop sampling. Only the new
    // glyph and mask input columns move.
    if let Some(g) = acc.get_mut("conv_in.w") {
        let c_lat = model.denoiser.cfg.latent_channels;
        let mut g4 = g.view_mut().into_dimensionality::<ndarray::Ix4>().unwrap();
        g4.slice_mut(ndarray::s![.., ..c_lat, .., ..]).fill(0.0);
    }
    let mut flat = flat;
    opt.update(&mut flat, &acc);
    model.set_flat_params(&flat);
    Ok(StepStats { step, loss: loss_sum, loss_text_term: text_sum, lr: opt.cfg.lr })
}

/// One training step for the unconditioned base model: plain noise-prediction
/// MSE, every parameter trainable, text embedding as the condition.
pub fn train_step_base(
    denoiser: &mut Denoiser,
    opt: &mut Adam,
    schedule: &NoiseSchedule,
    examples: &[(Array3<f64>, Array2<f64>)], // (z0, e_t)
    step: usize,
    cfg: &TrainConfig,
) -> Result<StepStats> {
    if examples.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    if denoiser.cfg.glyph_conditioned {
        return Err(Error::Config("base training expects an unconditioned model".into()));
    }
    let mut rng = nn::seeded_rng(cfg.seed, 2_000_000 + step as u64);
    let mut acc: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
    let mut loss_sum = 0.0;
    let scale = 1.0 / cfg.batch_size as f64;
    let names: Vec<String> = denoiser.params.keys().cloned().collect();
    for _ in 0..cfg.batch_size {
        let (z0, e_t) = &examples[rng.gen_range(0..examples.len())];
        let t = rng.gen_range(1..=schedule.t_max);
        let (c, h, w) = z0.dim();
        let eps = nn::randn(&mut rng, &[c, h, w], 1.0).into_dimensionality::<Ix3>().unwrap();
        let z_t = add_noise(schedule, z0, t, &eps)?;
        let mut tape = Tape::new();
        let vars = leaf_params(&mut tape, &denoiser.params);
        let zv = tape.leaf(z_t.into_dyn());
        let cv = tape.leaf2(e_t.clone());
        let ab = schedule.alpha_bar_at(t)?;
        let (eps_hat, _) = forward(&mut tape, &denoiser.cfg, &vars, zv, t, ab, cv, CondTokens::All)?;
        let eps_v = tape.leaf(eps.into_dyn());
        let diff = tape.sub(eps_v, eps_hat);
        let sq = tape.mul(diff, diff);
        let loss = tape.mean(sq);
        let loss_val = tape.scalar_value(loss);
        if !loss_val.is_finite() {
            return Err(Error::Divergence { step, detail: format!("loss = {loss_val}") });
        }
        loss_sum += loss_val * scale;
        let grads = tape.backward(loss);
        for name in &names {
            if let Some(g) = &grads[vars[name].0] {
                let entry = acc
                    .entry(name.clone())
                    .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
                entry.zip_mut_with(g, |a, b| *a += scale * b);
            }
        }
    }
    opt.update(&mut denoiser.params, &acc);
    Ok(StepStats { step, loss: loss_sum, loss_text_term: 0.0, lr: opt.cfg.lr })
}

// ---------------------------------------------------------------------------
// mask predictor
// ---------------------------------------------------------------------------

/// Per-pixel 5-layer MLP over denoiser feature vectors; outputs the
/// probability that a pixel belongs to the text region.
pub struct MaskPredictor {
    /// feature width -> hidden -> hidden -> hidden -> 1
    pub params: BTreeMap<String, ArrayD<f64>>,
    pub in_dim: usize,
    pub hidden: usize,
}

impl MaskPredictor {
    pub fn new(in_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = nn::seeded_rng(seed, 500);
        let mut p = BTreeMap::new();
        let dims = [in_dim, hidden, hidden, hidden, hidden, 1];
        for l in 0..5 {
            p.insert(
                format!("mlp.fc{l}.w"),
                nn::randn(&mut rng, &[dims[l], dims[l + 1]], (2.0 / dims[l] as f64).sqrt()),
            );
            p.insert(format!("mlp.fc{l}.b"), ArrayD::zeros(vec![dims[l + 1]]));
        }
        MaskPredictor { params: p, in_dim, hidden }
    }

    fn logits_on_tape(&self, tape: &mut Tape, vars: &BTreeMap<String, Var>, x: Var) -> Var {
        let mut h = x;
        for l in 0..5 {
            h = nn::linear(tape, h, vars[&format!("mlp.fc{l}.w")], vars[&format!("mlp.fc{l}.b")]);
            if l < 4 {
                h = tape.silu(h);
            }
        }
        h
    }

    /// Text-region probabilities for a `[c, h, w]` feature map -> `[h, w]`.
    pub fn predict(&self, features: &Array3<f64>) -> Array2<f64> {
        let (_, h, w) = features.dim();
        let mut tape = Tape::new();
        let vars = leaf_params(&mut tape, &self.params);
        let x = tape.leaf(features.clone().into_dyn());
        let tok = tape.spatial_to_tokens(x);
        let logits = self.logits_on_tape(&mut tape, &vars, tok);
        let probs = tape.sigmoid(logits);
        let v = tape.value(probs).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let mut out = Array2::<f64>::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                out[[i, j]] = v[[i * w + j, 0]];
            }
        }
        out
    }

    /// Hard location mask from thresholded probabilities: 0 where text is
    /// predicted (p >= 0.5), 1 elsewhere.
    pub fn predict_mask(&self, features: &Array3<f64>) -> Array2<f64> {
        self.predict(features).mapv(|p| if p >= 0.5 { 0.0 } else { 1.0 })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        archive::save_tensors(&self.params, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let params = archive::load_tensors(path)?;
        let in_dim = params["mlp.fc0.w"].shape()[0];
        let hidden = params["mlp.fc0.w"].shape()[1];
        Ok(MaskPredictor { params, in_dim, hidden })
    }
}

/// One MSE step of the mask predictor on cached `(features, target)` pairs,
/// where the target is `1 - mask` (1 inside the text region). The denoiser
/// is untouched.
pub fn train_mask_predictor_step(
    predictor: &mut MaskPredictor,
    opt: &mut Adam,
    batch: &[(Array3<f64>, Array2<f64>)],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("empty mask-predictor batch".into()));
    }
    let mut acc: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
    let scale = 1.0 / batch.len() as f64;
    let mut loss_sum = 0.0;
    for (features, target) in batch {
        let (_, h, w) = features.dim();
        let mut tape = Tape::new();
        let vars = leaf_params(&mut tape, &predictor.params);
        let x = tape.leaf(features.clone().into_dyn());
        let tok = tape.spatial_to_tokens(x);
        let logits = predictor.logits_on_tape(&mut tape, &vars, tok);
        let probs = tape.sigmoid(logits);
        let mut tcol = Array2::<f64>::zeros((h * w, 1));
        for i in 0..h {
            for j in 0..w {
                tcol[[i * w + j, 0]] = target[[i, j]];
            }
        }
        let tv = tape.leaf2(tcol);
        let diff = tape.sub(probs, tv);
        let sq = tape.mul(diff, diff);
        let loss = tape.mean(sq);
        let loss_val = tape.scalar_value(loss);
        if !loss_val.is_finite() {
            return Err(Error::Divergence { step: opt.step, detail: format!("loss = {loss_val}") });
        }
        loss_sum += loss_val * scale;
        let grads = tape.backward(loss);
        for (name, var) in &vars {
            if let Some(g) = &grads[var.0] {
                let entry = acc
                    .entry(name.clone())
                    .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
                entry.zip_mut_with(g, |a, b| *a += scale * b);
            }
        }
    }
    opt.update(&mut predictor.params, &acc);
    Ok(loss_sum)
}

/// Features for mask-predictor training: run the deterministic mask
/// estimation phase (all-ones mask, true glyph) from pure noise down to
/// `t_early` and return the final feature map.
pub fn early_phase_features(
    model: &GlyphDrawModel,
    schedule: &NoiseSchedule,
    glyph_latent: &Array2<f64>,
    e_g: &Array2<f64>,
    e_t: &Array2<f64>,
    t_early: usize,
    seed: u64,
) -> Result<Array3<f64>> {
    let cfg = &model.denoiser.cfg;
    let (c, res) = (cfg.latent_channels, cfg.resolution);
    if t_early == 0 || t_early > schedule.t_max {
        return Err(Error::Timestep { t: t_early as i64, lo: 1, hi: schedule.t_max as i64 });
    }
    let mut rng = nn::seeded_rng(seed, 3_000_000);
    let mut z = nn::randn(&mut rng, &[c, res, res], 1.0)
        .into_dimensionality::<Ix3>()
        .unwrap();
    let ones = Array2::<f64>::ones((res, res));
    let cond = model.conditioning.fuse(
        &crate::conditioning::GlyphEmbedding { tokens: e_g.clone() },
        &crate::conditioning::TextEmbedding { tokens: e_t.clone(), truncated: false },
    )?;
    let mut feat = None;
    let mut t = schedule.t_max;
    while t > t_early {
        let ab = schedule.alpha_bar_at(t)?;
        let input = stack_input(&z, glyph_latent, &ones, 1.0 - ab);
        let (eps_hat, f) =
            model.denoiser.predict_noise(&input, t, ab, &cond.fused, CondTokens::All)?;
        z = ddim_step(schedule, &z, &eps_hat, t, t - 1, 0.0, None)?;
        feat = Some(f);
        t -= 1;
    }
    feat.ok_or_else(|| Error::Config("t_early leaves no estimation steps".into()))
}

/// Intersection-over-union between predicted and true text regions
/// (region = pixels where the location mask is 0).
pub fn mask_iou(predicted_mask: &Array2<f64>, true_mask: &Array2<f64>) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (p, t) in predicted_mask.iter().zip(true_mask.iter()) {
        let p_text = *p < 0.5;
        let t_text = *t < 0.5;
        if p_text && t_text {
            inter += 1;
        }
        if p_text || t_text {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

// ---------------------------------------------------------------------------
// checkpoints and logs
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct OptimState {
    step: usize,
    cfg: AdamConfig,
}

/// Checkpoint: model weights, optimizer state, partition manifest.
pub fn save_checkpoint(dir: &Path, model: &GlyphDrawModel, opt: &Adam) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    model.save(dir)?;
    archive::save_tensors(&opt.m, &dir.join("adam_m.gdta"))?;
    archive::save_tensors(&opt.v, &dir.join("adam_v.gdta"))?;
    let state = OptimState { step: opt.step, cfg: opt.cfg.clone() };
    std::fs::write(dir.join("optim.json"), serde_json::to_string_pretty(&state)?)?;
    let partition = partition_params(&model.flat_params())?;
    std::fs::write(dir.join("partition.json"), serde_json::to_string_pretty(&partition)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(GlyphDrawModel, Adam)> {
    let model = GlyphDrawModel::load(dir)?;
    let state: OptimState =
        serde_json::from_str(&std::fs::read_to_string(dir.join("optim.json"))?)?;
    let mut opt = Adam::new(state.cfg);
    opt.step = state.step;
    opt.m = archive::load_tensors(&dir.join("adam_m.gdta"))?;
    opt.v = archive::load_tensors(&dir.join("adam_v.gdta"))?;
    Ok((model, opt))
}

/// Append one JSONL line per step to a training log.
pub fn append_log(path: &Path, stats: &StepStats) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(stats)?)?;
    Ok(())
}
