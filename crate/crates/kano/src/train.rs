//! End-to-end training: procedural ground-truth corpus, random degradation
//! sampling, aligned patch cropping, the multi-stage L1 loss over kernels
//! and reconstructions, Adam, and the step loop.
//!
//! Determinism contract: given the same config (including seed), two runs
//! produce bit-identical logs and models, independent of worker thread
//! count. Batch elements evaluate in parallel but their gradients reduce
//! in a fixed order.

use std::time::Instant;

use ndarray::{Array3, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cube::{Cube, Kernel};
use crate::degrade::{degrade, default_kernel_size, DegradationSpec};
use crate::error::{KanoError, Result};
use crate::tape::{Tape, Var};
use crate::unfold::{unfold_graph, Backbone, KanoModel, ModelConfig, ModelVars};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// HR patch side; must be divisible by `scale`
    pub patch: usize,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub scale: usize,
    pub channels: usize,
    /// 0 means derive from `scale`
    pub kernel_size: usize,
    pub stages: usize,
    pub backbone: Backbone,
    pub seed: u64,
    /// corpus size for the procedural dataset
    pub n_images: usize,
    /// side length of generated ground-truth images
    pub image_size: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub noise_max: f64,
    /// kernel-loss weights per stage; empty means 0.5 everywhere, 1.0 last
    pub alpha: Vec<f64>,
    /// image-loss weights per stage; same default
    pub beta: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            patch: 32,
            batch: 4,
            steps: 2000,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            scale: 2,
            channels: 3,
            kernel_size: 0,
            stages: 4,
            backbone: Backbone::Kan,
            seed: 0,
            n_images: 64,
            image_size: 64,
            sigma_min: 0.6,
            sigma_max: 5.0,
            noise_max: 25.0 / 255.0,
            alpha: Vec::new(),
            beta: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn kernel_size_resolved(&self) -> usize {
        if self.kernel_size == 0 {
            default_kernel_size(self.scale)
        } else {
            self.kernel_size
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut mc = ModelConfig::new(
            self.channels,
            self.scale,
            self.kernel_size_resolved(),
            self.stages,
        );
        mc.backbone = self.backbone;
        mc
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if self.patch == 0 || self.patch % self.scale != 0 {
            return Err(KanoError::Config(format!(
                "patch {} must be a positive multiple of scale {}",
                self.patch, self.scale
            )));
        }
        if self.batch == 0 || self.n_images == 0 {
            return Err(KanoError::Config("batch and n_images must be >= 1".into()));
        }
        if self.lr <= 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2)
        {
            return Err(KanoError::Config("bad optimizer constants".into()));
        }
        if self.sigma_min <= 0.0 || self.sigma_max < self.sigma_min || self.noise_max < 0.0 {
            return Err(KanoError::Config("bad degradation distribution bounds".into()));
        }
        if self.image_size < self.patch {
            return Err(KanoError::Config("image_size must be >= patch".into()));
        }
        for w in [&self.alpha, &self.beta] {
            if !w.is_empty() && w.len() != self.stages {
                return Err(KanoError::Config(format!(
                    "loss weight vector length {} != stages {}",
                    w.len(),
                    self.stages
                )));
            }
        }
        Ok(())
    }

    /// 0.5 for intermediate stages, 1.0 for the final one.
    pub fn stage_weights(&self) -> (Vec<f64>, Vec<f64>) {
        let default = |v: &Vec<f64>| {
            if v.is_empty() {
                let mut w = vec![0.5; self.stages];
                w[self.stages - 1] = 1.0;
                w
            } else {
                v.clone()
            }
        };
        (default(&self.alpha), default(&self.beta))
    }
}

/// One supervised example: clean image, observation, true kernel.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub x_gt: Cube,
    pub y: Cube,
    pub k_gt: Kernel,
    pub spec: DegradationSpec,
}

// ---- procedural ground-truth imagery --------------------------------------

/// Mixture of a smooth gradient, oriented sinusoids, and filled random
/// triangles, clipped to `[0,1]`. Channels share structure with per-channel
/// perturbations so spectral metrics stay meaningful.
pub fn gen_image<R: Rng>(rng: &mut R, c: usize, h: usize, w: usize) -> Cube {
    let mut data = Array3::zeros((c, h, w));
    // base gradient
    let g0 = rng.gen_range(0.2..0.8);
    let gx = rng.gen_range(-0.4..0.4);
    let gy = rng.gen_range(-0.4..0.4);
    for ch in 0..c {
        let off = rng.gen_range(-0.1..0.1);
        for i in 0..h {
            for j in 0..w {
                data[[ch, i, j]] =
                    g0 + off + gx * j as f64 / w as f64 + gy * i as f64 / h as f64;
            }
        }
    }
    // oriented sinusoids
    for _ in 0..rng.gen_range(1..=3) {
        let freq = rng.gen_range(1.0..6.0);
        let ang = rng.gen_range(0.0..std::f64::consts::PI);
        let (fx, fy) = (freq * ang.cos() / w as f64, freq * ang.sin() / h as f64);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let amp = rng.gen_range(0.05..0.25);
        let ch_gain: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..1.0)).collect();
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    data[[ch, i, j]] += amp
                        * ch_gain[ch]
                        * (std::f64::consts::TAU * (fx * j as f64 + fy * i as f64) + phase).sin();
                }
            }
        }
    }
    // filled triangles
    for _ in 0..rng.gen_range(1..=3) {
        let vx: Vec<(f64, f64)> = (0..3)
            .map(|_| (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64)))
            .collect();
        let shade: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.35..0.35)).collect();
        let edge = |a: (f64, f64), b: (f64, f64), p: (f64, f64)| {
            (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
        };
        for i in 0..h {
            for j in 0..w {
                let p = (j as f64 + 0.5, i as f64 + 0.5);
                let d0 = edge(vx[0], vx[1], p);
                let d1 = edge(vx[1], vx[2], p);
                let d2 = edge(vx[2], vx[0], p);
                let inside = (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0)
                    || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0);
                if inside {
                    for ch in 0..c {
                        data[[ch, i, j]] += shade[ch];
                    }
                }
            }
        }
    }
    data.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Cube { data }
}

/// Draw a degradation spec from the training distribution.
pub fn sample_spec<R: Rng>(config: &TrainConfig, rng: &mut R) -> DegradationSpec {
    DegradationSpec {
        scale: config.scale,
        kernel_size: config.kernel_size_resolved(),
        sigma_x: rng.gen_range(config.sigma_min..=config.sigma_max),
        sigma_y: rng.gen_range(config.sigma_min..=config.sigma_max),
        theta: rng.gen_range(-std::f64::consts::PI..=std::f64::consts::PI),
        noise_level: rng.gen_range(0.0..=config.noise_max),
        seed: rng.gen(),
    }
}

/// `n` independently degraded procedural images, deterministic in `seed`.
pub fn synth_dataset(n: usize, config: &TrainConfig, seed: u64) -> Result<Vec<SamplePair>> {
    if n == 0 {
        return Err(KanoError::Invalid("dataset size must be >= 1".into()));
    }
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let x_gt = gen_image(&mut rng, config.channels, config.image_size, config.image_size);
            let spec = sample_spec(config, &mut rng);
            let (y, k_gt) = degrade(&x_gt, &spec)?;
            Ok(SamplePair { x_gt, y, k_gt, spec })
        })
        .collect()
}

/// Aligned crop: the X offset is `scale` times the Y offset, and Y rows
/// whose receptive field touches the replicate-padded border are excluded
/// from the offset range when the image leaves room for it.
pub fn sample_patches<R: Rng>(
    pair: &SamplePair,
    patch: usize,
    scale: usize,
    rng: &mut R,
) -> Result<(Cube, Cube)> {
    let (_, hx, wx) = pair.x_gt.dim();
    let (_, hy, wy) = pair.y.dim();
    if patch % scale != 0 || patch == 0 {
        return Err(KanoError::Invalid(format!(
            "patch {patch} must be a positive multiple of scale {scale}"
        )));
    }
    let p = patch / scale;
    if p > hy || p > wy {
        return Err(KanoError::Invalid(format!(
            "patch {patch} exceeds image dims {hx}x{wx}"
        )));
    }
    let k = pair.k_gt.size();
    let c = k / 2;
    let range = |len_x: usize, len_y: usize| -> (usize, usize) {
        // first/last Y index whose stencil stays inside the unpadded image
        let lo = c.div_ceil(scale);
        let hi_signed = len_x as isize + c as isize - k as isize;
        let hi = if hi_signed < 0 { 0 } else { hi_signed as usize / scale };
        if lo + p <= hi + 1 && hi < len_y {
            (lo, hi + 1 - p)
        } else {
            (0, len_y - p)
        }
    };
    let (ylo, yhi) = range(hx, hy);
    let (xlo, xhi) = range(wx, wy);
    let oy = if yhi > ylo { rng.gen_range(ylo..=yhi) } else { ylo };
    let ox = if xhi > xlo { rng.gen_range(xlo..=xhi) } else { xlo };
    let xp = pair
        .x_gt
        .data
        .slice(ndarray::s![
            ..,
            oy * scale..oy * scale + patch,
            ox * scale..ox * scale + patch
        ])
        .to_owned();
    let yp = pair
        .y
        .data
        .slice(ndarray::s![.., oy..oy + p, ox..ox + p])
        .to_owned();
    Ok((Cube { data: xp }, Cube { data: yp }))
}

// ---- loss -----------------------------------------------------------------

/// `sum_t alpha_t ||K_gt - K_t||_1 + beta_t ||X_gt - X_t||_1`.
pub fn total_loss(
    stages: &[(Kernel, Cube)],
    k_gt: &Kernel,
    x_gt: &Cube,
    alpha: &[f64],
    beta: &[f64],
) -> Result<f64> {
    if stages.len() != alpha.len() || stages.len() != beta.len() {
        return Err(KanoError::Invalid(format!(
            "loss weights ({}, {}) do not match stage count {}",
            alpha.len(),
            beta.len(),
            stages.len()
        )));
    }
    let mut acc = 0.0;
    for (t, (k, x)) in stages.iter().enumerate() {
        acc += alpha[t] * k.l1_distance(k_gt);
        acc += beta[t]
            * x.data
                .iter()
                .zip(x_gt.data.iter())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
    }
    Ok(acc)
}

/// Graph form of [`total_loss`] over per-stage `(K, X)` variables; also
/// returns the separate kernel and image terms for logging.
pub fn total_loss_graph(
    tape: &Tape,
    stages: &[(Var, Var)],
    k_gt: &Kernel,
    x_gt: &Cube,
    alpha: &[f64],
    beta: &[f64],
) -> Result<(Var, Var, Var)> {
    if stages.len() != alpha.len() || stages.len() != beta.len() {
        return Err(KanoError::Invalid(format!(
            "loss weights ({}, {}) do not match stage count {}",
            alpha.len(),
            beta.len(),
            stages.len()
        )));
    }
    let kv = tape.leaf(k_gt.values().clone().into_dyn());
    let xv = tape.leaf(x_gt.data.clone().into_dyn());
    let mut loss_k: Option<Var> = None;
    let mut loss_x: Option<Var> = None;
    for (t, (k, x)) in stages.iter().enumerate() {
        let lk = kv.sub(k).abs().sum().scale(alpha[t]);
        let lx = xv.sub(x).abs().sum().scale(beta[t]);
        loss_k = Some(match loss_k {
            Some(a) => a.add(&lk),
            None => lk,
        });
        loss_x = Some(match loss_x {
            Some(a) => a.add(&lx),
            None => lx,
        });
    }
    let lk = loss_k.unwrap();
    let lx = loss_x.unwrap();
    Ok((lk.add(&lx), lk, lx))
}

// ---- Adam -----------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
    pub t: usize,
}

impl AdamState {
    pub fn new(params: &[ArrayD<f64>]) -> Self {
        AdamState {
            m: params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
            t: 0,
        }
    }
}

/// Standard bias-corrected Adam update, elementwise over every tensor.
pub fn adam_step(
    params: &mut [ArrayD<f64>],
    grads: &[ArrayD<f64>],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(KanoError::shape(
            "adam_step",
            format!(
                "params {} / grads {} / moments {}",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if p.shape() != g.shape() {
            return Err(KanoError::shape(
                "adam_step",
                format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
        azip_update(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn azip_update(
    p: &mut ArrayD<f64>,
    g: &ArrayD<f64>,
    m: &mut ArrayD<f64>,
    v: &mut ArrayD<f64>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
) {
    ndarray::Zip::from(p)
        .and(g)
        .and(m)
        .and(v)
        .for_each(|p, &g, m, v| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *p -= lr * mh / (vh.sqrt() + eps);
        });
}

// ---- training loop --------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub loss_k: f64,
    pub loss_x: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,loss_K,loss_X,lr,seconds\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step, r.loss, r.loss_k, r.loss_x, r.lr, r.seconds
            ));
        }
        out
    }
}

fn lr_at(config: &TrainConfig, step: usize) -> f64 {
    let mut lr = config.lr;
    if config.steps > 0 {
        if step * 10 > config.steps * 6 {
            lr *= 0.5;
        }
        if step * 10 > config.steps * 8 {
            lr *= 0.5;
        }
    }
    lr
}

/// One batch element's contribution, produced in parallel.
struct ElementResult {
    loss: f64,
    loss_k: f64,
    loss_x: f64,
    grads: Vec<ArrayD<f64>>,
}

fn batch_element(
    model: &KanoModel,
    pair: &SamplePair,
    x_patch: &Cube,
    y_patch: &Cube,
    alpha: &[f64],
    beta: &[f64],
) -> Result<ElementResult> {
    let tape = Tape::new(0);
    let vars = ModelVars::leaves(&tape, model);
    let stages = unfold_graph(&tape, y_patch, &vars, model)?;
    let (loss, lk, lx) = total_loss_graph(&tape, &stages, &pair.k_gt, x_patch, alpha, beta)?;
    let value = tape.forward(&loss)?;
    tape.backward(&loss)?;
    Ok(ElementResult {
        loss: value,
        loss_k: *lk.value().iter().next().unwrap(),
        loss_x: *lx.value().iter().next().unwrap(),
        grads: vars.grads(),
    })
}

/// Full training run. Returns the trained model and the per-step log.
pub fn train(config: &TrainConfig) -> Result<(KanoModel, TrainLog)> {
    train_on(config, None)
}

/// Like [`train`] but accepts a pre-built dataset (shared across runs, for
/// paired comparisons). `None` synthesizes one from the config seed.
pub fn train_on(config: &TrainConfig, dataset: Option<&[SamplePair]>) -> Result<(KanoModel, TrainLog)> {
    config.validate()?;
    let owned;
    let data: &[SamplePair] = match dataset {
        Some(d) => {
            if d.is_empty() {
                return Err(KanoError::Invalid("dataset must not be empty".into()));
            }
            d
        }
        None => {
            owned = synth_dataset(config.n_images, config, config.seed)?;
            &owned
        }
    };
    let (alpha, beta) = config.stage_weights();
    let mut model = KanoModel::init(config.model_config(), config.seed)?;
    let mut params = model.params_flat();
    let mut adam = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e3779b97f4a7c15));
    let mut log = TrainLog::default();
    let start = Instant::now();

    for step in 1..=config.steps {
        // descriptor sampling stays on one thread for determinism
        let batch: Vec<(usize, Cube, Cube)> = (0..config.batch)
            .map(|_| {
                let idx = rng.gen_range(0..data.len());
                let (xp, yp) = sample_patches(&data[idx], config.patch, config.scale, &mut rng)?;
                Ok((idx, xp, yp))
            })
            .collect::<Result<_>>()?;

        let results: Vec<Result<ElementResult>> = batch
            .par_iter()
            .map(|(idx, xp, yp)| batch_element(&model, &data[*idx], xp, yp, &alpha, &beta))
            .collect();

        let mut loss = 0.0;
        let mut loss_k = 0.0;
        let mut loss_x = 0.0;
        let mut grads: Option<Vec<ArrayD<f64>>> = None;
        for r in results {
            let r = r.map_err(|e| {
                KanoError::Invalid(format!("step {step}: batch element failed: {e}"))
            })?;
            loss += r.loss;
            loss_k += r.loss_k;
            loss_x += r.loss_x;
            match &mut grads {
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(r.grads.iter()) {
                        *a += g;
                    }
                }
                None => grads = Some(r.grads),
            }
        }
        let nb = config.batch as f64;
        loss /= nb;
        loss_k /= nb;
        loss_x /= nb;
        let mut grads = grads.unwrap();
        for g in &mut grads {
            g.mapv_inplace(|v| v / nb);
        }
        if !loss.is_finite() {
            return Err(KanoError::Invalid(format!(
                "step {step}: non-finite loss {loss} (loss_K {loss_k}, loss_X {loss_x})"
            )));
        }

        let lr = lr_at(config, step);
        adam_step(
            &mut params,
            &grads,
            &mut adam,
            lr,
            config.beta1,
            config.beta2,
            config.eps,
        )?;
        model.set_params_flat(&params)?;

        log.rows.push(LogRow {
            step,
            loss,
            loss_k,
            loss_x,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok((model, log))
}
