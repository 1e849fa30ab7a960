//! Small two-resolution UNet noise predictor.
//!
//! Two variants share the code path: the base model takes the `c`-channel
//! latent and cross-attends the text embedding directly; the glyph-conditioned
//! model takes `c + 2` input channels (latent ++ glyph plane ++ location mask,
//! in that order) and cross-attends the fused condition. A glyph-conditioned
//! model built from a base checkpoint keeps every base weight bit-for-bit and
//! zero-initializes only the two new input-channel slices of `conv_in`, so it
//! reproduces the base model exactly until those weights move.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, Ix2, Ix3};
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::error::{Error, Result};
use crate::nn;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct UNetConfig {
    /// Latent channel count c (the model outputs this many channels).
    pub latent_channels: usize,
    /// Square latent resolution; must be even (one 2x downsample inside).
    pub resolution: usize,
    /// Channel widths at (full, downsampled) resolution.
    pub widths: (usize, usize),
    /// Timestep embedding width.
    pub time_dim: usize,
    /// Width of the condition tokens this model cross-attends.
    pub cond_dim: usize,
    /// Inner dimension of the attention blocks.
    pub attn_dim: usize,
    /// Whether the input carries the two extra conditioning planes.
    pub glyph_conditioned: bool,
    pub seed: u64,
}

impl UNetConfig {
    pub fn desk_default(cond_dim: usize) -> Self {
        UNetConfig {
            latent_channels: 3,
            resolution: 32,
            widths: (16, 32),
            time_dim: 32,
            cond_dim,
            attn_dim: 32,
            glyph_conditioned: true,
            seed: 11,
        }
    }

    pub fn in_channels(&self) -> usize {
        if self.glyph_conditioned {
            self.latent_channels + 2
        } else {
            self.latent_channels
        }
    }

    fn validate(&self) -> Result<()> {
        if self.resolution % 2 != 0 {
            return Err(Error::Config("resolution must be even".into()));
        }
        if self.widths.0 == 0 || self.widths.1 == 0 || self.latent_channels == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        Ok(())
    }
}

pub struct Denoiser {
    pub cfg: UNetConfig,
    pub params: BTreeMap<String, ArrayD<f64>>,
}

fn init_resblock(
    p: &mut BTreeMap<String, ArrayD<f64>>,
    rng: &mut rand_chacha::ChaCha8Rng,
    prefix: &str,
    cin: usize,
    cout: usize,
    time_dim: usize,
) {
    let std1 = (2.0 / (cin * 9) as f64).sqrt();
    let std2 = (2.0 / (cout * 9) as f64).sqrt();
    p.insert(format!("{prefix}.norm1.gamma"), ArrayD::ones(vec![cin]));
    p.insert(format!("{prefix}.norm1.beta"), ArrayD::zeros(vec![cin]));
    p.insert(format!("{prefix}.conv1.w"), nn::randn(rng, &[cout, cin, 3, 3], std1));
    p.insert(format!("{prefix}.conv1.b"), ArrayD::zeros(vec![cout]));
    p.insert(
        format!("{prefix}.temb.w"),
        nn::randn(rng, &[time_dim, cout], (1.0 / time_dim as f64).sqrt()),
    );
    p.insert(format!("{prefix}.temb.b"), ArrayD::zeros(vec![cout]));
    p.insert(format!("{prefix}.norm2.gamma"), ArrayD::ones(vec![cout]));
    p.insert(format!("{prefix}.norm2.beta"), ArrayD::zeros(vec![cout]));
    p.insert(format!("{prefix}.conv2.w"), nn::randn(rng, &[cout, cout, 3, 3], std2));
    p.insert(format!("{prefix}.conv2.b"), ArrayD::zeros(vec![cout]));
    if cin != cout {
        p.insert(
            format!("{prefix}.skip.w"),
            nn::randn(rng, &[cout, cin, 1, 1], (1.0 / cin as f64).sqrt()),
        );
    }
}

fn init_attn_block(
    p: &mut BTreeMap<String, ArrayD<f64>>,
    rng: &mut rand_chacha::ChaCha8Rng,
    prefix: &str,
    d: usize,
    d_a: usize,
    d_cond: usize,
) {
    let std_d = (1.0 / d as f64).sqrt();
    let std_c = (1.0 / d_cond as f64).sqrt();
    let std_a = (1.0 / d_a as f64).sqrt();
    p.insert(format!("{prefix}.self.norm.gamma"), ArrayD::ones(vec![d]));
    p.insert(format!("{prefix}.self.norm.beta"), ArrayD::zeros(vec![d]));
    for m in ["w_q", "w_k", "w_v"] {
        p.insert(format!("{prefix}.self.{m}"), nn::randn(rng, &[d, d_a], std_d));
    }
    p.insert(format!("{prefix}.self.w_o"), nn::randn(rng, &[d_a, d], std_a));
    p.insert(format!("{prefix}.cross.norm.gamma"), ArrayD::ones(vec![d]));
    p.insert(format!("{prefix}.cross.norm.beta"), ArrayD::zeros(vec![d]));
    p.insert(format!("{prefix}.cross.w_q"), nn::randn(rng, &[d, d_a], std_d));
    p.insert(format!("{prefix}.cross.w_k"), nn::randn(rng, &[d_cond, d_a], std_c));
    p.insert(format!("{prefix}.cross.w_v"), nn::randn(rng, &[d_cond, d_a], std_c));
    p.insert(format!("{prefix}.cross.w_o"), nn::randn(rng, &[d_a, d], std_a));
}

fn init_cross_attn_block(
    p: &mut BTreeMap<String, ArrayD<f64>>,
    rng: &mut rand_chacha::ChaCha8Rng,
    prefix: &str,
    d: usize,
    d_a: usize,
    d_cond: usize,
) {
    let std_d = (1.0 / d as f64).sqrt();
    let std_c = (1.0 / d_cond as f64).sqrt();
    let std_a = (1.0 / d_a as f64).sqrt();
    p.insert(format!("{prefix}.cross.norm.gamma"), ArrayD::ones(vec![d]));
    p.insert(format!("{prefix}.cross.norm.beta"), ArrayD::zeros(vec![d]));
    p.insert(format!("{prefix}.cross.w_q"), nn::randn(rng, &[d, d_a], std_d));
    p.insert(format!("{prefix}.cross.w_k"), nn::randn(rng, &[d_cond, d_a], std_c));
    p.insert(format!("{prefix}.cross.w_v"), nn::randn(rng, &[d_cond, d_a], std_c));
    p.insert(format!("{prefix}.cross.w_o"), nn::randn(rng, &[d_a, d], std_a));
}

impl Denoiser {
    pub fn new(cfg: UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let (w0, w1) = cfg.widths;
        let c_in = cfg.in_channels();
        let mut rng = nn::seeded_rng(cfg.seed, 400);
        let mut p = BTreeMap::new();
        p.insert(
            "conv_in.w".to_string(),
            nn::randn(&mut rng, &[w0, c_in, 3, 3], (2.0 / (c_in * 9) as f64).sqrt()),
        );
        p.insert("conv_in.b".to_string(), ArrayD::zeros(vec![w0]));
        p.insert(
            "time.fc1.w".to_string(),
            nn::randn(&mut rng, &[cfg.time_dim, cfg.time_dim], (1.0 / cfg.time_dim as f64).sqrt()),
        );
        p.insert("time.fc1.b".to_string(), ArrayD::zeros(vec![cfg.time_dim]));
        p.insert(
            "time.fc2.w".to_string(),
            nn::randn(&mut rng, &[cfg.time_dim, cfg.time_dim], (1.0 / cfg.time_dim as f64).sqrt()),
        );
        p.insert("time.fc2.b".to_string(), ArrayD::zeros(vec![cfg.time_dim]));
        init_resblock(&mut p, &mut rng, "down0.res", w0, w0, cfg.time_dim);
        init_resblock(&mut p, &mut rng, "down1.res", w0, w1, cfg.time_dim);
        init_attn_block(&mut p, &mut rng, "mid.attn", w1, cfg.attn_dim, cfg.cond_dim);
        init_resblock(&mut p, &mut rng, "mid.res", w1, w1, cfg.time_dim);
        init_resblock(&mut p, &mut rng, "up0.res", w0 + w1, w0, cfg.time_dim);
        init_cross_attn_block(&mut p, &mut rng, "up.attn", w0, cfg.attn_dim, cfg.cond_dim);
        p.insert("out.norm.gamma".to_string(), ArrayD::ones(vec![w0]));
        p.insert("out.norm.beta".to_string(), ArrayD::zeros(vec![w0]));
        p.insert(
            "conv_out.w".to_string(),
            nn::randn(&mut rng, &[cfg.latent_channels, w0, 3, 3], (2.0 / (w0 * 9) as f64).sqrt()),
        );
        p.insert("conv_out.b".to_string(), ArrayD::zeros(vec![cfg.latent_channels]));
        Ok(Denoiser { cfg, params: p })
    }

    /// Build a glyph-conditioned model from a base model: every weight is
    /// copied bit-for-bit and `conv_in` gains two zero-initialized input
    /// channel slices (appended after the latent channels). `cond_dim` may
    /// change hands only if the condition width stays the same, since the
    /// cross-attention projections are reused.
    pub fn from_base(base: &Denoiser) -> Result<Self> {
        if base.cfg.glyph_conditioned {
            return Err(Error::Config("source model is already glyph-conditioned".into()));
        }
        let mut cfg = base.cfg.clone();
        cfg.glyph_conditioned = true;
        let mut p = base.params.clone();
        let old = base.params["conv_in.w"].view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let (w0, cin, kh, kw) = old.dim();
        let mut widened = ndarray::Array4::<f64>::zeros((w0, cin + 2, kh, kw));
        widened.slice_mut(ndarray::s![.., ..cin, .., ..]).assign(&old);
        p.insert("conv_in.w".to_string(), widened.into_dyn());
        Ok(Denoiser { cfg, params: p })
    }

    /// Noise prediction outside of training: returns `(eps_hat, features)`
    /// where `features` is the pre-projection feature map at latent
    /// resolution, the input to the mask predictor.
    pub fn predict_noise(
        &self,
        z: &Array3<f64>,
        t: usize,
        alpha_bar: f64,
        cond: &Array2<f64>,
        attend: CondTokens,
    ) -> Result<(Array3<f64>, Array3<f64>)> {
        let mut tape = Tape::new();
        let vars = crate::conditioning::leaf_params(&mut tape, &self.params);
        let zv = tape.leaf(z.clone().into_dyn());
        let cv = tape.leaf2(cond.clone());
        let (eps, feat) = forward(&mut tape, &self.cfg, &vars, zv, t, alpha_bar, cv, attend)?;
        let take3 = |v: Var, tape: &Tape| {
            tape.value(v).view().into_dimensionality::<Ix3>().unwrap().to_owned()
        };
        Ok((take3(eps, &tape), take3(feat, &tape)))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        archive::save_tensors(&self.params, &dir.join("weights.gdta"))?;
        let json = serde_json::to_string_pretty(&self.cfg)?;
        std::fs::write(dir.join("unet.json"), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg: UNetConfig =
            serde_json::from_str(&std::fs::read_to_string(dir.join("unet.json"))?)?;
        let params = archive::load_tensors(&dir.join("weights.gdta"))?;
        cfg.validate()?;
        Ok(Denoiser { cfg, params })
    }
}

/// Which rows of the condition matrix the cross-attention may see.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CondTokens {
    All,
    /// Attend only rows `[start, start+len)` — used to hide glyph tokens so
    /// a freshly widened model reproduces the base model exactly.
    Slice { start: usize, len: usize },
}

/// Per-pixel channel normalization with affine parameters, on tape.
fn channel_norm(tape: &mut Tape, x: Var, gamma: Var, beta: Var) -> Var {
    let shape = tape.value(x).shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let tok = tape.spatial_to_tokens(x);
    let n = tape.layer_norm_rows(tok, 1e-6);
    let n = tape.mul_row_broadcast(n, gamma);
    let n = tape.add_row_broadcast(n, beta);
    tape.tokens_to_spatial(n, h, w)
}

fn resblock(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    prefix: &str,
    x: Var,
    temb: Var,
) -> Var {
    let g = |name: &str| vars[&format!("{prefix}.{name}")];
    let h = channel_norm(tape, x, g("norm1.gamma"), g("norm1.beta"));
    let h = tape.silu(h);
    let h = tape.conv2d(h, g("conv1.w"), 1);
    let h = tape.add_channel_broadcast(h, g("conv1.b"));
    // inject the timestep: project the embedding to a per-channel bias
    let tproj = tape.matmul(temb, g("temb.w"));
    let tproj = tape.add_row_broadcast(tproj, g("temb.b"));
    let h = add_time(tape, h, tproj);
    let h = channel_norm(tape, h, g("norm2.gamma"), g("norm2.beta"));
    let h = tape.silu(h);
    let h = tape.conv2d(h, g("conv2.w"), 1);
    let h = tape.add_channel_broadcast(h, g("conv2.b"));
    let skip = if vars.contains_key(&format!("{prefix}.skip.w")) {
        tape.conv2d(x, g("skip.w"), 0)
    } else {
        x
    };
    tape.add(skip, h)
}

/// Add a `[1, c]` row vector to a `[c, h, w]` feature map as a per-channel
/// bias, keeping the whole path on tape.
fn add_time(tape: &mut Tape, x: Var, row: Var) -> Var {
    let shape = tape.value(x).shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let tok = tape.spatial_to_tokens(x); // [h*w, c]
    let ones = tape.leaf2(Array2::<f64>::ones((h * w, 1)));
    let stacked = tape.matmul(ones, row); // [h*w, c], each row a copy
    let sum = tape.add(tok, stacked);
    tape.tokens_to_spatial(sum, h, w)
}

fn attn_block(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    prefix: &str,
    x: Var,
    cond: Var,
) -> Var {
    let g = |name: &str| vars[&format!("{prefix}.{name}")];
    let shape = tape.value(x).shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let mut tok = tape.spatial_to_tokens(x);
    // self-attention
    let normed = nn::layer_norm_affine(tape, tok, g("self.norm.gamma"), g("self.norm.beta"));
    let a = nn::attention(tape, normed, normed, g("self.w_q"), g("self.w_k"), g("self.w_v"));
    let a = tape.matmul(a, g("self.w_o"));
    tok = tape.add(tok, a);
    // cross-attention over the condition tokens
    let normed = nn::layer_norm_affine(tape, tok, g("cross.norm.gamma"), g("cross.norm.beta"));
    let a = nn::attention(tape, normed, cond, g("cross.w_q"), g("cross.w_k"), g("cross.w_v"));
    let a = tape.matmul(a, g("cross.w_o"));
    tok = tape.add(tok, a);
    tape.tokens_to_spatial(tok, h, w)
}

/// Cross-attention-only block used at full latent resolution, where a
/// quadratic self-attention over every pixel would dominate the step cost.
/// The residual write through `w_v`/`w_o` lets the condition inject content
/// one layer before the output head.
fn cross_attn_block(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    prefix: &str,
    x: Var,
    cond: Var,
) -> Var {
    let g = |name: &str| vars[&format!("{prefix}.{name}")];
    let shape = tape.value(x).shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let tok = tape.spatial_to_tokens(x);
    let normed = nn::layer_norm_affine(tape, tok, g("cross.norm.gamma"), g("cross.norm.beta"));
    let a = nn::attention(tape, normed, cond, g("cross.w_q"), g("cross.w_k"), g("cross.w_v"));
    let a = tape.matmul(a, g("cross.w_o"));
    let tok = tape.add(tok, a);
    tape.tokens_to_spatial(tok, h, w)
}

/// Full UNet forward pass on tape. `z` is `[in_channels, res, res]`, `cond`
/// is `[L, cond_dim]`, `alpha_bar` is the cumulative signal fraction at step
/// `t`. Returns `(eps_hat, features)`.
///
/// The trunk regresses the clean latent; the noise estimate is composed
/// analytically as `(z - sqrt(alpha_bar) * x0_hat) / sqrt(1 - alpha_bar)`.
/// A direct noise head has to reproduce the high-frequency input noise
/// through the conv trunk, and its residual error is itself high-frequency;
/// amplified by `1/sqrt(alpha_bar)` during sampling it destroys the
/// trajectory. Predicting the clean latent keeps the trunk's target smooth
/// while the exposed interface is still a noise estimate.
pub fn forward(
    tape: &mut Tape,
    cfg: &UNetConfig,
    vars: &BTreeMap<String, Var>,
    z: Var,
    t: usize,
    alpha_bar: f64,
    cond: Var,
    attend: CondTokens,
) -> Result<(Var, Var)> {
    if !(alpha_bar > 0.0 && alpha_bar < 1.0) {
        return Err(Error::Constraint(format!("alpha_bar must be in (0, 1), got {alpha_bar}")));
    }
    let zshape = tape.value(z).shape().to_vec();
    if zshape != [cfg.in_channels(), cfg.resolution, cfg.resolution] {
        return Err(Error::Shape(format!(
            "denoiser input must be {:?}, got {:?}",
            [cfg.in_channels(), cfg.resolution, cfg.resolution],
            zshape
        )));
    }
    if tape.value(cond).shape()[1] != cfg.cond_dim {
        return Err(Error::Shape(format!(
            "condition width {} != configured {}",
            tape.value(cond).shape()[1],
            cfg.cond_dim
        )));
    }
    let cond = match attend {
        CondTokens::All => cond,
        CondTokens::Slice { start, len } => tape.slice_rows(cond, start, len),
    };

    // timestep embedding -> 2-layer MLP, kept as a [1, time_dim] row
    let emb = nn::timestep_embedding(t, cfg.time_dim);
    let emb = tape.leaf2(emb.insert_axis(ndarray::Axis(0)).into_dimensionality::<Ix2>().unwrap());
    let temb = tape.matmul(emb, vars["time.fc1.w"]);
    let temb = tape.add_row_broadcast(temb, vars["time.fc1.b"]);
    let temb = tape.silu(temb);
    let temb = tape.matmul(temb, vars["time.fc2.w"]);
    let temb = tape.add_row_broadcast(temb, vars["time.fc2.b"]);

    let h0 = tape.conv2d(z, vars["conv_in.w"], 1);
    let h0 = tape.add_channel_broadcast(h0, vars["conv_in.b"]);
    let h0 = resblock(tape, vars, "down0.res", h0, temb);
    let d = tape.avg_pool2d(h0, 2);
    let d = resblock(tape, vars, "down1.res", d, temb);
    let d = attn_block(tape, vars, "mid.attn", d, cond);
    let d = resblock(tape, vars, "mid.res", d, temb);
    let u = tape.upsample_nearest(d, 2);
    let u = tape.concat_channels(h0, u);
    let u = resblock(tape, vars, "up0.res", u, temb);
    let u = cross_attn_block(tape, vars, "up.attn", u, cond);
    let feat = channel_norm(tape, u, vars["out.norm.gamma"], vars["out.norm.beta"]);
    let feat = tape.silu(feat);
    let x0 = tape.conv2d(feat, vars["conv_out.w"], 1);
    let x0 = tape.add_channel_broadcast(x0, vars["conv_out.b"]);
    // pick the noisy-latent channels out of the (possibly widened) input
    let zlat = if cfg.in_channels() == cfg.latent_channels {
        z
    } else {
        let tok = tape.spatial_to_tokens(z); // [res*res, in_channels]
        let mut sel = Array2::<f64>::zeros((cfg.in_channels(), cfg.latent_channels));
        for c in 0..cfg.latent_channels {
            sel[[c, c]] = 1.0;
        }
        let sel = tape.leaf2(sel);
        let ztok = tape.matmul(tok, sel);
        tape.tokens_to_spatial(ztok, cfg.resolution, cfg.resolution)
    };
    let scaled_x0 = tape.scale(x0, -(alpha_bar.sqrt()) / (1.0 - alpha_bar).sqrt());
    let scaled_z = tape.scale(zlat, 1.0 / (1.0 - alpha_bar).sqrt());
    let eps = tape.add(scaled_z, scaled_x0);
    Ok((eps, feat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::leaf_params;

    fn tiny_cfg(glyph: bool) -> UNetConfig {
        UNetConfig {
            latent_channels: 2,
            resolution: 8,
            widths: (6, 10),
            time_dim: 8,
            cond_dim: 12,
            attn_dim: 8,
            glyph_conditioned: glyph,
            seed: 11,
        }
    }

    fn rand_input(cfg: &UNetConfig, seed: u64) -> (Array3<f64>, Array2<f64>) {
        let mut rng = nn::seeded_rng(seed, 1);
        let z = nn::randn(&mut rng, &[cfg.in_channels(), cfg.resolution, cfg.resolution], 1.0)
            .into_dimensionality::<Ix3>()
            .unwrap();
        let cond = nn::randn2(&mut rng, 7, cfg.cond_dim, 1.0);
        (z, cond)
    }

    #[test]
    fn output_shapes_and_determinism() {
        let d = Denoiser::new(tiny_cfg(true)).unwrap();
        let (z, cond) = rand_input(&d.cfg, 5);
        let (eps, feat) = d.predict_noise(&z, 3, 0.5, &cond, CondTokens::All).unwrap();
        assert_eq!(eps.dim(), (2, 8, 8));
        assert_eq!(feat.dim(), (6, 8, 8));
        let (eps2, _) = d.predict_noise(&z, 3, 0.5, &cond, CondTokens::All).unwrap();
        assert_eq!(eps, eps2);
    }

    #[test]
    fn timestep_changes_output() {
        let d = Denoiser::new(tiny_cfg(true)).unwrap();
        let (z, cond) = rand_input(&d.cfg, 5);
        let (a, _) = d.predict_noise(&z, 1, 0.5, &cond, CondTokens::All).unwrap();
        let (b, _) = d.predict_noise(&z, 40, 0.5, &cond, CondTokens::All).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn condition_changes_output() {
        let d = Denoiser::new(tiny_cfg(true)).unwrap();
        let (z, cond) = rand_input(&d.cfg, 5);
        let mut cond2 = cond.clone();
        cond2[[0, 0]] += 1.0;
        let (a, _) = d.predict_noise(&z, 3, 0.5, &cond, CondTokens::All).unwrap();
        let (b, _) = d.predict_noise(&z, 3, 0.5, &cond2, CondTokens::All).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let d = Denoiser::new(tiny_cfg(true)).unwrap();
        let z = Array3::<f64>::zeros((2, 8, 8)); // missing the 2 extra planes
        let cond = Array2::<f64>::zeros((7, 12));
        assert!(matches!(
            d.predict_noise(&z, 3, 0.5, &cond, CondTokens::All),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn widened_model_with_hidden_glyph_tokens_matches_base_bitwise() {
        let base = Denoiser::new(tiny_cfg(false)).unwrap();
        let gd = Denoiser::from_base(&base).unwrap();
        assert!(gd.cfg.glyph_conditioned);

        let mut rng = nn::seeded_rng(9, 2);
        let z = nn::randn(&mut rng, &[2, 8, 8], 1.0).into_dimensionality::<Ix3>().unwrap();
        let e_t = nn::randn2(&mut rng, 4, 12, 1.0);
        let e_g = nn::randn2(&mut rng, 3, 12, 1.0);
        // glyph-conditioned input: latent ++ arbitrary glyph/mask planes
        let mut zg = Array3::<f64>::zeros((4, 8, 8));
        zg.slice_mut(ndarray::s![..2, .., ..]).assign(&z);
        zg.slice_mut(ndarray::s![2.., .., ..]).fill(0.7);
        // condition: glyph tokens first, then text tokens
        let cond = ndarray::concatenate(ndarray::Axis(0), &[e_g.view(), e_t.view()]).unwrap();

        let (eps_base, feat_base) = base.predict_noise(&z, 5, 0.5, &e_t, CondTokens::All).unwrap();
        let (eps_gd, feat_gd) = gd
            .predict_noise(&zg, 5, 0.5, &cond, CondTokens::Slice { start: 3, len: 4 })
            .unwrap();
        // bitwise equality: zero weights on the new planes and a row slice
        // that reproduces e_t exactly
        assert_eq!(eps_base, eps_gd);
        assert_eq!(feat_base, feat_gd);
    }

    #[test]
    fn from_base_rejects_conditioned_source() {
        let gd = Denoiser::new(tiny_cfg(true)).unwrap();
        assert!(matches!(Denoiser::from_base(&gd), Err(Error::Config(_))));
    }

    #[test]
    fn save_load_roundtrip_is_exact() {
        let d = Denoiser::new(tiny_cfg(true)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        let d2 = Denoiser::load(dir.path()).unwrap();
        assert_eq!(d.cfg, d2.cfg);
        assert_eq!(d.params, d2.params);
    }

    #[test]
    fn forward_gradients_match_finite_differences() {
        let cfg = UNetConfig {
            latent_channels: 1,
            resolution: 4,
            widths: (3, 4),
            time_dim: 4,
            cond_dim: 5,
            attn_dim: 4,
            glyph_conditioned: true,
            seed: 11,
        };
        let d = Denoiser::new(cfg.clone()).unwrap();
        let mut rng = nn::seeded_rng(21, 3);
        let z = nn::randn(&mut rng, &[3, 4, 4], 1.0);
        let cond = nn::randn2(&mut rng, 4, 5, 1.0);

        let run = |params: &BTreeMap<String, ArrayD<f64>>| {
            let mut tape = Tape::new();
            let vars = leaf_params(&mut tape, params);
            let zv = tape.leaf(z.clone());
            let cv = tape.leaf2(cond.clone());
            let (eps, _) = forward(&mut tape, &cfg, &vars, zv, 2, 0.5, cv, CondTokens::All).unwrap();
            let sq = tape.mul(eps, eps);
            let loss = tape.mean(sq);
            let grads = tape.backward(loss);
            let mut named = BTreeMap::new();
            for (name, var) in &vars {
                if let Some(g) = &grads[var.0] {
                    named.insert(name.clone(), g.clone());
                }
            }
            (tape.scalar_value(loss), named)
        };
        let (_, grads) = run(&d.params);
        let eps_fd = 1e-6;
        for name in ["conv_in.w", "mid.attn.cross.w_k", "mid.attn.cross.w_v", "down1.res.conv1.w", "time.fc1.w", "up0.res.temb.w"] {
            let g = grads.get(name).unwrap_or_else(|| panic!("no grad for {name}"));
            for idx in [0usize, 2] {
                let mut plus = d.params.clone();
                plus.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] += eps_fd;
                let mut minus = d.params.clone();
                minus.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] -= eps_fd;
                let fd = (run(&plus).0 - run(&minus).0) / (2.0 * eps_fd);
                let an = *g.iter().nth(idx).unwrap();
                let denom = an.abs().max(fd.abs()).max(1e-10);
                assert!((an - fd).abs() / denom <= 1e-4, "{name}[{idx}]: {an} vs {fd}");
            }
        }
    }
}
