use glyphdraw::conditioning::{ConditioningConfig, DEFAULT_VOCAB};
use glyphdraw::data_pipeline::{synthesize_sample, BackgroundKind, SynthesisConfig, TextSample};
use glyphdraw::denoiser::{Denoiser, UNetConfig};
use glyphdraw::diffusion::NoiseSchedule;
use glyphdraw::evaluation::{calibrate_threshold, is_correct, OcrOracle, SPELLING_TEMPLATE};
use glyphdraw::glyph_assets::{glyph_to_latent, mask_to_latent, GlyphAtlas};
use glyphdraw::training::*;
use ndarray::{Array2, Array3};
use rand::Rng;
use std::time::Instant;

const CANVAS: usize = 32;
const CHARSET: &str = "ABCDEFGHIJ";

fn configs() -> (UNetConfig, ConditioningConfig) {
    let cond = ConditioningConfig {
        d_c: 48,
        text_len: 40,
        vocab: DEFAULT_VOCAB.to_string(),
        text_layers: 1,
        text_heads: 4,
        glyph_res: 32,
        patch: 8,
        include_class_token: true,
        fusion_layers: 1,
        fusion_heads: 4,
        seed: 7,
    };
    let unet = UNetConfig {
        latent_channels: 3,
        resolution: 32,
        widths: (12, 24),
        time_dim: 16,
        cond_dim: 48,
        attn_dim: 16,
        glyph_conditioned: false,
        seed: 11,
    };
    (unet, cond)
}

fn random_word(rng: &mut impl Rng, len: usize) -> String {
    let cs: Vec<char> = CHARSET.chars().collect();
    (0..len).map(|_| cs[rng.gen_range(0..cs.len())]).collect()
}

fn to_example(model: &GlyphDrawModel, s: &TextSample) -> TrainExample {
    let eg = model.conditioning.encode_glyph(&s.glyph).unwrap();
    let et = model.conditioning.encode_text(&s.caption);
    TrainExample {
        z0: s.image.clone(),
        glyph_latent: {
            let atlas = GlyphAtlas::builtin(CHARSET).unwrap();
            glyphdraw::glyph_assets::glyph_channel(&s.text, &s.mask.pixels, &atlas).unwrap()
        },
        mask_latent: mask_to_latent(&s.mask, 1).unwrap().pixels,
        e_g: eg.tokens,
        e_t: et.tokens,
    }
}

fn corpus(atlas: &GlyphAtlas, syn: &SynthesisConfig) -> (Vec<TextSample>, Vec<TextSample>) {
    let mut rng = glyphdraw::nn::seeded_rng(42, 10);
    let mut empties = Vec::new();
    let mut texties = Vec::new();
    for i in 0..180usize {
        let text = if i < 60 { String::new() } else { random_word(&mut rng, 1 + i % 4) };
        let s = synthesize_sample(
            1000 + i as u64,
            (CANVAS, CANVAS),
            &text,
            BackgroundKind::from_id(i as u32),
            atlas,
            syn,
        )
        .unwrap();
        if text.is_empty() { empties.push(s) } else { texties.push(s) }
    }
    (empties, texties)
}

fn trained(
    schedule: &NoiseSchedule,
    empties: &[TextSample],
    texties: &[TextSample],
) -> (GlyphDrawModel, Denoiser) {
    let dir = std::path::Path::new("/tmp/probe_models");
    let redo_gd = std::env::var("PROBE_REDO_GD").is_ok();
    if dir.join("gd/unet.json").exists() && !redo_gd {
        println!("loading cached models from {dir:?}");
        return (
            GlyphDrawModel::load(&dir.join("gd")).unwrap(),
            Denoiser::load(&dir.join("base")).unwrap(),
        );
    }
    let (base_cfg, cond_cfg) = configs();
    let mut base = Denoiser::new(base_cfg).unwrap();
    if redo_gd && dir.join("base/unet.json").exists() {
        base = Denoiser::load(&dir.join("base")).unwrap();
        let cond_cfg2 = cond_cfg.clone();
        let mut model = GlyphDrawModel::from_base(&base, cond_cfg2).unwrap();
        let examples: Vec<_> = texties.iter().map(|s| to_example(&model, s)).collect();
        let gcfg = TrainConfig { lr: 1e-3, alpha: 0.5, batch_size: 4, seed: 2 };
        let mut opt = Adam::new(AdamConfig { lr: gcfg.lr, ..AdamConfig::default() });
        let gd_steps = 3000;
        let mut avg = 0.0;
        for step in 0..gd_steps {
            if step == 1500 { opt.cfg.lr = 5e-4 }
            if step == 2500 { opt.cfg.lr = 2e-4 }
            let st = train_step(&mut model, &mut opt, schedule, &examples, step, &gcfg).unwrap();
            avg += st.loss;
            if step % 250 == 249 {
                println!("gd step {step}: avg loss {:.4}", avg / 250.0);
                avg = 0.0;
            }
        }
        model.save(&dir.join("gd")).unwrap();
        return (model, base);
    }
    let probe_model = GlyphDrawModel::from_base(&base, cond_cfg.clone()).unwrap();
    let base_ex: Vec<_> = empties
        .iter()
        .chain(texties.iter())
        .map(|s| (s.image.clone(), probe_model.conditioning.encode_text(&s.caption).tokens))
        .collect();
    let bcfg = TrainConfig { lr: 2e-3, alpha: 0.0, batch_size: 4, seed: 1 };
    let mut opt = Adam::new(AdamConfig { lr: bcfg.lr, ..AdamConfig::default() });
    let t0 = Instant::now();
    let base_steps: usize = std::env::var("BASE_STEPS").ok().and_then(|v| v.parse().ok()).unwrap_or(12000);
    let mut avg = 0.0;
    for step in 0..base_steps {
        if step == base_steps / 2 { opt.cfg.lr = 1e-3 }
        if step == base_steps * 3 / 4 { opt.cfg.lr = 4e-4 }
        let st = train_step_base(&mut base, &mut opt, schedule, &base_ex, step, &bcfg).unwrap();
        avg += st.loss;
        if step % 500 == 499 {
            println!("base step {step}: avg loss {:.4}", avg / 500.0);
            avg = 0.0;
        }
    }
    println!("base {base_steps} steps in {:?}", t0.elapsed());

    let mut model = GlyphDrawModel::from_base(&base, cond_cfg).unwrap();
    let examples: Vec<_> = texties.iter().map(|s| to_example(&model, s)).collect();
    let gcfg = TrainConfig { lr: 1e-3, alpha: 0.5, batch_size: 4, seed: 2 };
    let mut opt = Adam::new(AdamConfig { lr: gcfg.lr, ..AdamConfig::default() });
    let t0 = Instant::now();
    let gd_steps: usize = std::env::var("GD_STEPS").ok().and_then(|v| v.parse().ok()).unwrap_or(3000);
    let mut avg = 0.0;
    for step in 0..gd_steps {
        if step == gd_steps / 2 { opt.cfg.lr = 5e-4 }
        if step == gd_steps * 5 / 6 { opt.cfg.lr = 2e-4 }
        let st = train_step(&mut model, &mut opt, schedule, &examples, step, &gcfg).unwrap();
        avg += st.loss;
        if step % 250 == 249 {
            println!("gd step {step}: avg loss {:.4}", avg / 250.0);
            avg = 0.0;
        }
    }
    println!("glyphdraw {gd_steps} steps in {:?}", t0.elapsed());
    std::fs::create_dir_all(dir).unwrap();
    model.save(&dir.join("gd")).unwrap();
    base.save(&dir.join("base")).unwrap();
    (model, base)
}

/// stats: per-channel mean, and mean |neighbor diff| (smoothness; clean bgs are ~0.01)
fn img_stats(img: &Array3<f64>) -> (f64, f64) {
    let mut mean = 0.0;
    for v in img.iter() {
        mean += v;
    }
    mean /= img.len() as f64;
    let mut rough = 0.0;
    let mut n = 0usize;
    for c in 0..3 {
        for i in 0..CANVAS {
            for j in 0..CANVAS - 1 {
                rough += (img[[c, i, j + 1]] - img[[c, i, j]]).abs();
                n += 1;
            }
        }
    }
    (mean, rough / n as f64)
}

/// DDIM over an arbitrary decreasing timestep subsequence, optional z0-clamping.
fn sample_strided(
    schedule: &NoiseSchedule,
    ts: &[usize],
    clamp: bool,
    seed: u64,
    mut eps_fn: impl FnMut(&Array3<f64>, usize) -> Array3<f64>,
) -> Array3<f64> {
    let mut rng = glyphdraw::nn::seeded_rng(seed, 4_000_000);
    let mut z = glyphdraw::nn::randn(&mut rng, &[3, CANVAS, CANVAS], 1.0)
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap();
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = if i + 1 < ts.len() { ts[i + 1] } else { 0 };
        let mut eps_hat = eps_fn(&z, t);
        if clamp {
            let z0_hat = glyphdraw::diffusion::predict_z0(schedule, &z, &eps_hat, t)
                .unwrap()
                .mapv(|v| v.clamp(0.0, 1.0));
            let ab = schedule.alpha_bar_at(t).unwrap();
            eps_hat = (&z - &z0_hat.mapv(|v| v * ab.sqrt())) / (1.0 - ab).sqrt();
        }
        z = glyphdraw::diffusion::ddim_step(schedule, &z, &eps_hat, t, t_prev, 0.0, None).unwrap();
    }
    z.mapv(|v| v.clamp(0.0, 1.0))
}

fn hops(t_max: usize, n: usize) -> Vec<usize> {
    // n roughly evenly spaced timesteps from t_max down, always ending at 1
    let mut ts: Vec<usize> = (0..n)
        .map(|i| (t_max as f64 * (1.0 - i as f64 / n as f64)).round().max(1.0) as usize)
        .collect();
    ts.dedup();
    if *ts.last().unwrap() != 1 {
        ts.push(1);
    }
    ts
}


fn oracle_ncc(atlas: &GlyphAtlas, img: &ndarray::Array3<f64>, mask: &Array2<f64>, ch: char) -> f64 {
    // bbox of mask==0
    let (mut i0, mut i1, mut j0, mut j1) = (usize::MAX, 0usize, usize::MAX, 0usize);
    for i in 0..CANVAS {
        for j in 0..CANVAS {
            if mask[[i, j]] < 0.5 {
                i0 = i0.min(i); i1 = i1.max(i); j0 = j0.min(j); j1 = j1.max(j);
            }
        }
    }
    let tpl = atlas.glyph(ch).unwrap().clone();
    let (th, tw) = tpl.dim();
    if i1 < i0 || i1 - i0 + 1 < th || j1 - j0 + 1 < tw { return 0.0 }
    let mut best = 0.0f64;
    for oi in i0..=(i1 + 1 - th) {
        for oj in j0..=(j1 + 1 - tw) {
            let (mut sw, mut st, mut swt, mut sww, mut stt) = (0.0, 0.0, 0.0, 0.0, 0.0);
            let n = (th * tw) as f64;
            for a in 0..th {
                for b in 0..tw {
                    let v = (img[[0, oi + a, oj + b]] + img[[1, oi + a, oj + b]] + img[[2, oi + a, oj + b]]) / 3.0;
                    let u = 1.0 - tpl[[a, b]];
                    sw += v; st += u; swt += v * u; sww += v * v; stt += u * u;
                }
            }
            let cov = swt - sw * st / n;
            let var1 = (sww - sw * sw / n).max(1e-12);
            let var2 = (stt - st * st / n).max(1e-12);
            let ncc = cov / (var1 * var2).sqrt();
            best = best.max(ncc.abs());
        }
    }
    best
}

#[test]
fn probe_e2e() {
    let t_all = Instant::now();
    let atlas = GlyphAtlas::builtin(CHARSET).unwrap();
    let schedule = NoiseSchedule::linear_with(50, 2e-3, 0.1).unwrap();
    let syn = SynthesisConfig { margin_frac: 0.10, max_jitter: 2 };
    let (empties, texties) = corpus(&atlas, &syn);

    let (model, base) = trained(&schedule, &empties, &texties);

    let cal_set: Vec<_> = texties.iter().map(|s| (s.image.clone(), s.text.clone())).collect();
    let cal = calibrate_threshold(&atlas, &cal_set).unwrap();
    println!("ocr threshold {} acc {:.3}", cal.threshold, cal.accuracy);
    let oracle = OcrOracle::from_atlas(&atlas, cal.threshold);

    let skip_a = std::env::var("PROBE_SKIP_A").is_ok();
    // --- experiment A: base background generation at various hop counts -----
    let et_empty = model.conditioning.encode_text(&empties[0].caption).tokens;
    for n in if skip_a { vec![] } else { vec![50usize] } {
        let ts = hops(50, n);
        for clamp in [false, true] {
            let img = sample_strided(&schedule, &ts, clamp, 321, |z, t| {
                base.predict_noise(z, t, schedule.alpha_bar_at(t).unwrap(), &et_empty, glyphdraw::denoiser::CondTokens::All)
                    .unwrap()
                    .0
            });
            let (mean, rough) = img_stats(&img);
            println!("base bg hops={n} clamp={clamp}: mean {mean:.3} rough {rough:.4}");
            glyphdraw::data_pipeline::save_rgb_png(
                &img,
                std::path::Path::new(&format!("/tmp/probe_bg_h{n}_c{}.png", clamp as u8)),
            )
            .unwrap();
        }
    }
    {
        let (mean, rough) = img_stats(&empties[0].image);
        println!("reference clean bg: mean {mean:.3} rough {rough:.4}");
    }

    // --- diagnostic: base-model recon of a text image from its caption ------
    for t in [15usize, 30, 45] {
        let s = &texties[0];
        let et = model.conditioning.encode_text(&s.caption).tokens;
        let mut r2 = glyphdraw::nn::seeded_rng(9, 9);
        let eps = glyphdraw::nn::randn(&mut r2, &[3, CANVAS, CANVAS], 1.0)
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        let z_t = glyphdraw::diffusion::add_noise(&schedule, &s.image, t, &eps).unwrap();
        let (eps_hat, _) = base
            .predict_noise(&z_t, t, schedule.alpha_bar_at(t).unwrap(), &et, glyphdraw::denoiser::CondTokens::All)
            .unwrap();
        let z0_hat = glyphdraw::diffusion::predict_z0(&schedule, &z_t, &eps_hat, t).unwrap();
        let mask = mask_to_latent(&s.mask, 1).unwrap().pixels;
        let (mut ein, mut nin, mut eout, mut nout) = (0.0, 0usize, 0.0, 0usize);
        for c in 0..3 {
            for i in 0..CANVAS {
                for j in 0..CANVAS {
                    let e = (z0_hat[[c, i, j]] - s.image[[c, i, j]]).abs();
                    if mask[[i, j]] < 0.5 { ein += e; nin += 1 } else { eout += e; nout += 1 }
                }
            }
        }
        println!("BASE recon t={t}: |x0 err| text {:.3}, elsewhere {:.3}", ein / nin as f64, eout / nout as f64);
    }

    // --- refine: continue gd training at lower lr, save back ---------------
    let mut model = model;
    {
        let examples: Vec<_> = texties.iter().map(|s| to_example(&model, s)).collect();
        let gcfg = TrainConfig { lr: 1e-3, alpha: 0.5, batch_size: 4, seed: 3 };
        let mut opt = Adam::new(AdamConfig { lr: gcfg.lr, ..AdamConfig::default() });
        let extra: usize = std::env::var("PROBE_REFINE").ok().and_then(|v| v.parse().ok()).unwrap_or(0);
        let t0 = Instant::now();
        for step in 0..extra {
            let st = train_step(&mut model, &mut opt, &schedule, &examples, step, &gcfg).unwrap();
            if step % 300 == 0 {
                println!("refine step {step}: loss {:.4}", st.loss);
            }
        }
        println!("refined {extra} steps in {:?}", t0.elapsed());
        model.save(std::path::Path::new("/tmp/probe_models/gd")).unwrap();
    }

    // --- recon diagnostics: one-step x0 estimate on a noised real sample ----
    for t in [5usize, 15, 30, 45] {
        let s = &texties[0];
        let ex = to_example(&model, s);
        let mut r2 = glyphdraw::nn::seeded_rng(9, 9);
        let eps = glyphdraw::nn::randn(&mut r2, &[3, CANVAS, CANVAS], 1.0)
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        let z_t = glyphdraw::diffusion::add_noise(&schedule, &ex.z0, t, &eps).unwrap();
        let input = stack_input(&z_t, &ex.glyph_latent, &ex.mask_latent, 1.0 - schedule.alpha_bar_at(t).unwrap());
        let cond = model
            .conditioning
            .fuse(
                &glyphdraw::conditioning::GlyphEmbedding { tokens: ex.e_g.clone() },
                &glyphdraw::conditioning::TextEmbedding { tokens: ex.e_t.clone(), truncated: false },
            )
            .unwrap()
            .fused;
        let (eps_hat, _) = model
            .denoiser
            .predict_noise(&input, t, schedule.alpha_bar_at(t).unwrap(), &cond, glyphdraw::denoiser::CondTokens::All)
            .unwrap();
        let z0_hat = glyphdraw::diffusion::predict_z0(&schedule, &z_t, &eps_hat, t).unwrap();
        let (mut ein, mut nin, mut eout, mut nout) = (0.0, 0usize, 0.0, 0usize);
        for c in 0..3 {
            for i in 0..CANVAS {
                for j in 0..CANVAS {
                    let e = (z0_hat[[c, i, j]] - ex.z0[[c, i, j]]).abs();
                    if ex.mask_latent[[i, j]] < 0.5 { ein += e; nin += 1 } else { eout += e; nout += 1 }
                }
            }
        }
        println!("recon t={t}: |x0 err| text {:.3}, elsewhere {:.3}", ein / nin as f64, eout / nout as f64);
    }

    // --- expressivity: can the partition memorize one example? --------------
    if std::env::var("PROBE_OVERFIT").is_ok() {
        let mut m2 = GlyphDrawModel::load(std::path::Path::new("/tmp/probe_models/gd")).unwrap();
        let one = vec![to_example(&m2, &texties[0])];
        let gcfg = TrainConfig { lr: 3e-3, alpha: 0.5, batch_size: 4, seed: 9 };
        let mut opt = Adam::new(AdamConfig { lr: gcfg.lr, ..AdamConfig::default() });
        for step in 0..600 {
            let st = train_step(&mut m2, &mut opt, &schedule, &one, step, &gcfg).unwrap();
            if step % 150 == 0 {
                println!("overfit step {step}: loss {:.4}", st.loss);
            }
        }
        for t in [5usize, 15, 30, 45] {
            let ex = &one[0];
            let mut r2 = glyphdraw::nn::seeded_rng(9, 9);
            let eps = glyphdraw::nn::randn(&mut r2, &[3, CANVAS, CANVAS], 1.0)
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap();
            let z_t = glyphdraw::diffusion::add_noise(&schedule, &ex.z0, t, &eps).unwrap();
            let input = stack_input(&z_t, &ex.glyph_latent, &ex.mask_latent, 1.0 - schedule.alpha_bar_at(t).unwrap());
            let cond = m2
                .conditioning
                .fuse(
                    &glyphdraw::conditioning::GlyphEmbedding { tokens: ex.e_g.clone() },
                    &glyphdraw::conditioning::TextEmbedding { tokens: ex.e_t.clone(), truncated: false },
                )
                .unwrap()
                .fused;
            let (eps_hat, _) = m2
                .denoiser
                .predict_noise(&input, t, schedule.alpha_bar_at(t).unwrap(), &cond, glyphdraw::denoiser::CondTokens::All)
                .unwrap();
            let z0_hat = glyphdraw::diffusion::predict_z0(&schedule, &z_t, &eps_hat, t).unwrap();
            let (mut ein, mut nin, mut eout, mut nout) = (0.0, 0usize, 0.0, 0usize);
            for c in 0..3 {
                for i in 0..CANVAS {
                    for j in 0..CANVAS {
                        let e = (z0_hat[[c, i, j]] - ex.z0[[c, i, j]]).abs();
                        if ex.mask_latent[[i, j]] < 0.5 { ein += e; nin += 1 } else { eout += e; nout += 1 }
                    }
                }
            }
            println!("overfit recon t={t}: |x0 err| text {:.3}, elsewhere {:.3}", ein / nin as f64, eout / nout as f64);
        }
    }

    // --- weight audit: how far did each trainable tensor move from init ----
    if std::env::var("PROBE_W").is_ok() {
        let w = model.denoiser.params["conv_in.w"].view().into_dimensionality::<ndarray::Ix4>().unwrap();
        for c in 0..w.dim().1 {
            let n = w.slice(ndarray::s![.., c, .., ..]).mapv(|v| v * v).sum().sqrt();
            println!("conv_in.w input-channel {c}: l2 {n:.4}");
        }
        for (name, p) in &model.denoiser.params {
            if name.contains("cross.w_k") || name.contains("cross.w_v") {
                let n = p.mapv(|v| v * v).sum().sqrt();
                let b = base.params.get(name).map(|q| (q - p).mapv(|v| v * v).sum().sqrt());
                println!("{name}: l2 {n:.4} delta-from-base {:?}", b.map(|x| format!("{x:.4}")));
            }
        }
        let mut fl2 = 0.0;
        for (name, p) in &model.conditioning.fusion_params {
            let n: f64 = p.mapv(|v| v * v).sum();
            fl2 += n;
            let _ = name;
        }
        println!("fusion total l2 {:.4}", fl2.sqrt());
    }

    // --- conditioning steering: does the glyph condition move x0 toward the
    // conditioned letter when the latent carries a different letter (or pure
    // noise)?
    if std::env::var("PROBE_COND").is_ok() {
        let letters = ["A", "B", "C", "D"];
        for t in [45usize, 30, 15] {
            let mut diag = 0usize;
            for (i, want) in letters.iter().enumerate() {
                // latent carries a different letter than the condition
                let other = letters[(i + 1) % letters.len()];
                let lay_z = synthesize_sample(91_000 + i as u64, (CANVAS, CANVAS), other, BackgroundKind::from_id(1), &atlas, &syn).unwrap();
                let lay_c = synthesize_sample(91_000 + i as u64, (CANVAS, CANVAS), want, BackgroundKind::from_id(1), &atlas, &syn).unwrap();
                let exz = to_example(&model, &lay_z);
                let exc = to_example(&model, &lay_c);
                let prompt = SPELLING_TEMPLATE.replace('*', &format!("\"{want}\""));
                let et = model.conditioning.encode_text(&prompt);
                let cond = model
                    .conditioning
                    .fuse(
                        &glyphdraw::conditioning::GlyphEmbedding { tokens: exc.e_g.clone() },
                        &glyphdraw::conditioning::TextEmbedding { tokens: et.tokens, truncated: et.truncated },
                    )
                    .unwrap()
                    .fused;
                let mut r2 = glyphdraw::nn::seeded_rng(31, i as u64);
                let eps = glyphdraw::nn::randn(&mut r2, &[3, CANVAS, CANVAS], 1.0)
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap();
                let z_t = glyphdraw::diffusion::add_noise(&schedule, &exz.z0, t, &eps).unwrap();
                let input = stack_input(&z_t, &exc.glyph_latent, &exc.mask_latent, 1.0 - schedule.alpha_bar_at(t).unwrap());
                let (eps_hat, _) = model
                    .denoiser
                    .predict_noise(&input, t, schedule.alpha_bar_at(t).unwrap(), &cond, glyphdraw::denoiser::CondTokens::All)
                    .unwrap();
                let x0 = glyphdraw::diffusion::predict_z0(&schedule, &z_t, &eps_hat, t)
                    .unwrap()
                    .mapv(|v| v.clamp(0.0, 1.0));
                let sa = oracle_ncc(&atlas, &x0, &exc.mask_latent, want.chars().next().unwrap());
                let sb = oracle_ncc(&atlas, &x0, &exc.mask_latent, other.chars().next().unwrap());
                let mut best = (f64::MIN, ' ');
                for ch in CHARSET.chars() {
                    let sc = oracle_ncc(&atlas, &x0, &exc.mask_latent, ch);
                    if sc > best.0 { best = (sc, ch) }
                }
                if best.1 == want.chars().next().unwrap() { diag += 1 }
                println!(
                    "cond t={t} want {want} (z has {other}): ncc(want) {sa:.3} ncc(z-letter) {sb:.3} argmax {} {:.3}",
                    best.1, best.0
                );
            }
            println!("cond t={t}: argmax correct {diag}/{}", letters.len());
        }
    }

    // --- trajectory diagnostic: OCR the intermediate x0 estimates -----------
    if std::env::var("PROBE_TRAJ").is_ok() {
        let k = 0usize;
        let word = "A".to_string();
        let layout = synthesize_sample(88_000, (CANVAS, CANVAS), &word, BackgroundKind::from_id(0), &atlas, &syn).unwrap();
        let ex = to_example(&model, &layout);
        let prompt = SPELLING_TEMPLATE.replace('*', "\"A\"");
        let et = model.conditioning.encode_text(&prompt);
        let et_base = et.tokens.clone();
        let cond = model
            .conditioning
            .fuse(
                &glyphdraw::conditioning::GlyphEmbedding { tokens: ex.e_g.clone() },
                &glyphdraw::conditioning::TextEmbedding { tokens: et.tokens, truncated: et.truncated },
            )
            .unwrap()
            .fused;
        let mut rng0 = glyphdraw::nn::seeded_rng(k as u64, 4_000_000);
        let mut z = glyphdraw::nn::randn(&mut rng0, &[3, CANVAS, CANVAS], 1.0)
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        for t in (1..=50usize).rev() {
            let input = stack_input(&z, &ex.glyph_latent, &ex.mask_latent, 1.0 - schedule.alpha_bar_at(t).unwrap());
            let (eps_hat, _) = model
                .denoiser
                .predict_noise(&input, t, schedule.alpha_bar_at(t).unwrap(), &cond, glyphdraw::denoiser::CondTokens::All)
                .unwrap();
            if t % 10 == 0 || t == 1 || t == 45 {
                let x0 = glyphdraw::diffusion::predict_z0(&schedule, &z, &eps_hat, t)
                    .unwrap()
                    .mapv(|v| v.clamp(0.0, 1.0));
                let mut best = (0.0f64, ' ');
                // scan NCC of every atlas letter at the true mask location
                for ch in CHARSET.chars() {
                    let sc = oracle_ncc(&atlas, &x0, &ex.mask_latent, ch);
                    if sc > best.0 { best = (sc, ch) }
                }
                let rough = |x: &ndarray::Array3<f64>| {
                    let (c, h, w) = x.dim();
                    let mut s = 0.0;
                    for ci in 0..c {
                        for i in 0..h {
                            for j in 1..w {
                                s += (x[[ci, i, j]] - x[[ci, i, j - 1]]).abs();
                            }
                        }
                    }
                    s / (c * h * (w - 1)) as f64
                };
                let (beps, _) = base
                    .predict_noise(&z, t, schedule.alpha_bar_at(t).unwrap(), &et_base, glyphdraw::denoiser::CondTokens::All)
                    .unwrap();
                let bx0 = glyphdraw::diffusion::predict_z0(&schedule, &z, &beps, t)
                    .unwrap()
                    .mapv(|v| v.clamp(0.0, 1.0));
                println!(
                    "traj t={t}: best ncc {:.3} ({}), want {word}; rough gd {:.4} base {:.4}",
                    best.0, best.1, rough(&x0), rough(&bx0)
                );
                glyphdraw::data_pipeline::save_rgb_png(
                    &x0,
                    std::path::Path::new(&format!("/tmp/probe_traj_t{t}.png")),
                )
                .unwrap();
                glyphdraw::data_pipeline::save_rgb_png(
                    &bx0,
                    std::path::Path::new(&format!("/tmp/probe_traj_base_t{t}.png")),
                )
                .unwrap();
            }
            z = glyphdraw::diffusion::ddim_step(&schedule, &z, &eps_hat, t, t - 1, 0.0, None).unwrap();
        }
    }

    // --- Sampler-based generation at r = 1.0 and 0.5 -------------------------
    use glyphdraw::inference::{Codec, GenerationRequest, MaskSource, Sampler, SamplerConfig};
    let sampler = Sampler {
        model: &model,
        base: Some(&base),
        predictor: None,
        schedule: &schedule,
        atlas: &atlas,
        codec: Codec::Identity,
    };
    for (r, eta) in [(1.0f64, 0.0f64), (1.0, 1.0), (1.0, 0.5), (0.5, 1.0)] {
        let mut good = 0usize;
        for k in 0..12usize {
            let len = 1 + k % 4;
            let mut r3 = glyphdraw::nn::seeded_rng(500 + k as u64, 0);
            let word = random_word(&mut r3, len);
            let layout = synthesize_sample(
                88_000 + k as u64,
                (CANVAS, CANVAS),
                &word,
                BackgroundKind::from_id(k as u32),
                &atlas,
                &syn,
            )
            .unwrap();
            let prompt = SPELLING_TEMPLATE.replace('*', &format!("\"{word}\""));
            let req = GenerationRequest {
                prompt,
                text: word.clone(),
                mask_source: MaskSource::Given(mask_to_latent(&layout.mask, 1).unwrap().pixels),
            };
            let scfg = SamplerConfig { steps: 50, t_early: 35, r, eta, seed: k as u64 };
            let out = sampler.generate(&req, &scfg).unwrap();
            let read = oracle.read(&out.image);
            let ok = is_correct(&word, &read, glyphdraw::data_pipeline::Language::En);
            if ok { good += 1 }
            if k < 6 {
                print!("r={r} eta={eta} gen {k}: want {word:?} read {read:?} ok={ok} |");
                for th in [0.5, 0.7, 0.85] {
                    let o = OcrOracle::from_atlas(&atlas, th);
                    print!(" @{th}:{:?}", o.read(&out.image));
                }
                println!();
            }
            if k < 2 {
                glyphdraw::data_pipeline::save_rgb_png(
                    &out.image,
                    std::path::Path::new(&format!("/tmp/probe_r{}_e{}_{k}.png", (r * 10.0) as u32, (eta * 10.0) as u32)),
                )
                .unwrap();
            }
        }
        println!("sampler r={r} eta={eta}: accuracy {good}/12");
    }

    let _ = &texties[0] as &TextSample;
    let _: Option<Array2<f64>> = None;
    println!("total {:?}", t_all.elapsed());
}
