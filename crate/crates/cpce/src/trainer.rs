//! Alternating WGAN-GP optimization of generator and critic with Adam, a
//! 1/t learning-rate schedule, validation tracking, and checkpointing.

use std::path::Path;

use ndarray::{Array1, ArrayD};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CpceError, Result};
use crate::exec::ExecMode;
use crate::io_data::{container, PatchPair};
use crate::losses::{
    self, perceptual_loss_and_grad, FeatureExtractor, Reduction,
};
use crate::model::{
    build_discriminator_custom, build_generator_with_channels, critic_backward,
    critic_forward_cached, critic_input_grad, critic_jvp, critic_tangent_param_grads,
    generator_backward, generator_forward_batch, generator_forward_cached, CriticGrads,
    DiscriminatorParams, GeneratorParams, CRITIC_CHANNELS, CRITIC_FC1,
};
use crate::ops::Tensor;

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam over a fixed list of flat parameter slots (the order produced by
/// `param_slices`).
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl Adam {
    pub fn new(slot_sizes: &[usize], beta1: f32, beta2: f32) -> Self {
        Adam {
            beta1,
            beta2,
            eps: 1e-8,
            m: slot_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: slot_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn for_params(slices: &[&[f32]], beta1: f32, beta2: f32) -> Self {
        let sizes: Vec<usize> = slices.iter().map(|s| s.len()).collect();
        Adam::new(&sizes, beta1, beta2)
    }

    pub fn step(&mut self, lr: f32, params: &mut [&mut [f32]], grads: &[&[f32]]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (slot, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
            debug_assert_eq!(p.len(), self.m[slot].len());
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration and state
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    #[default]
    OneOverT,
    None,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub lambda_gp: f32,
    pub lambda_p: f32,
    pub n_critic: usize,
    pub epochs: usize,
    pub lr_decay: LrDecay,
    pub seed: u64,
    /// Validation cadence as a fraction of an epoch.
    pub eval_every: f64,
    /// Critic width; smaller values for fast tests.
    pub critic_channels: Vec<usize>,
    pub critic_fc1: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            lr: 1.0e-4,
            beta1: 0.9,
            beta2: 0.999,
            lambda_gp: 10.0,
            lambda_p: 0.1,
            n_critic: 4,
            epochs: 10,
            lr_decay: LrDecay::OneOverT,
            seed: 0,
            eval_every: 0.5,
            critic_channels: CRITIC_CHANNELS.to_vec(),
            critic_fc1: CRITIC_FC1,
        }
    }
}

impl TrainConfig {
    /// Epoch learning rate (epochs count from 1).
    pub fn lr_at(&self, epoch: usize) -> f32 {
        match self.lr_decay {
            LrDecay::OneOverT => self.lr / epoch.max(1) as f32,
            LrDecay::None => self.lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: u64,
    pub pl: f64,
    pub wd: f64,
    pub mse: f64,
}

pub fn history_to_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from("step,pl,wd,mse\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.pl, r.wd, r.mse));
    }
    out
}

pub fn history_from_csv(text: &str) -> Result<Vec<HistoryRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("step,pl,wd,mse") => {}
        other => {
            return Err(CpceError::config(format!(
                "bad history header: {other:?}"
            )))
        }
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(CpceError::config(format!("history line {}: {l}", i + 2)));
            }
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| CpceError::config(format!("history line {}: {e}", i + 2)))
            };
            Ok(HistoryRow {
                step: f[0]
                    .parse()
                    .map_err(|e| CpceError::config(format!("history line {}: {e}", i + 2)))?,
                pl: parse(f[1])?,
                wd: parse(f[2])?,
                mse: parse(f[3])?,
            })
        })
        .collect()
}

pub struct TrainState {
    pub generator: GeneratorParams,
    pub critic: DiscriminatorParams,
    pub g_opt: Adam,
    pub d_opt: Adam,
    pub epoch: usize,
    pub step: u64,
    pub history: Vec<HistoryRow>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainConfig,
    epoch: usize,
    step: u64,
    adam_t: [u64; 2],
    gen_d: usize,
    gen_channels: usize,
    critic_input_hw: usize,
    history: Vec<HistoryRow>,
}

fn copy_named(dst: &mut [&mut [f32]], names: &[String], arrays: &[(String, ArrayD<f32>)]) -> Result<()> {
    for (slot, name) in names.iter().enumerate() {
        let a = container::get_array(arrays, name)?;
        let src = a.as_slice().expect("standard layout");
        if src.len() != dst[slot].len() {
            return Err(CpceError::shape(format!(
                "checkpoint array `{name}` has {} values, expected {}",
                src.len(),
                dst[slot].len()
            )));
        }
        dst[slot].copy_from_slice(src);
    }
    Ok(())
}

impl TrainState {
    pub fn new(generator: GeneratorParams, cfg: &TrainConfig, patch: usize) -> Self {
        let critic = build_discriminator_custom(
            &cfg.critic_channels,
            cfg.critic_fc1,
            patch,
            cfg.seed ^ 0xD15C_0000,
        );
        let g_opt = Adam::for_params(&generator.param_slices(), cfg.beta1, cfg.beta2);
        let d_opt = Adam::for_params(&critic.param_slices(), cfg.beta1, cfg.beta2);
        TrainState {
            generator,
            critic,
            g_opt,
            d_opt,
            epoch: 0,
            step: 0,
            history: Vec::new(),
        }
    }

    fn moment_arrays(prefix: &str, opt: &Adam) -> Vec<(String, ArrayD<f32>)> {
        let mut out = Vec::new();
        for (i, (m, v)) in opt.m.iter().zip(opt.v.iter()).enumerate() {
            out.push((format!("{prefix}.m{i}"), Array1::from_vec(m.clone()).into_dyn()));
            out.push((format!("{prefix}.v{i}"), Array1::from_vec(v.clone()).into_dyn()));
        }
        out
    }

    fn load_moments(prefix: &str, opt: &mut Adam, arrays: &[(String, ArrayD<f32>)]) -> Result<()> {
        for i in 0..opt.m.len() {
            for (kind, dst) in [("m", &mut opt.m[i]), ("v", &mut opt.v[i])] {
                let a = container::get_array(arrays, &format!("{prefix}.{kind}{i}"))?;
                if a.len() != dst.len() {
                    return Err(CpceError::shape(format!(
                        "moment {prefix}.{kind}{i} has {} values, expected {}",
                        a.len(),
                        dst.len()
                    )));
                }
                dst.copy_from_slice(a.as_slice().unwrap());
            }
        }
        Ok(())
    }

    /// Writes the checkpoint container `<path>` plus a `<path>.json`
    /// sidecar with hyperparameters, counters, and history.
    pub fn save(&self, path: &Path, cfg: &TrainConfig) -> Result<()> {
        let mut arrays = Vec::new();
        for (name, a) in self.generator.named_arrays() {
            arrays.push((format!("g.{name}"), a));
        }
        arrays.extend(self.critic.named_arrays());
        arrays.extend(Self::moment_arrays("g_opt", &self.g_opt));
        arrays.extend(Self::moment_arrays("d_opt", &self.d_opt));
        container::save_container(path, &arrays)?;
        let meta = CheckpointMeta {
            config: cfg.clone(),
            epoch: self.epoch,
            step: self.step,
            adam_t: [self.g_opt.t, self.d_opt.t],
            gen_d: self.generator.input_d(),
            gen_channels: self.generator.channels,
            critic_input_hw: self.critic.input_hw,
            history: self.history.clone(),
        };
        let side = path.with_extension("json");
        std::fs::write(
            &side,
            serde_json::to_string_pretty(&meta).map_err(|e| CpceError::config(e.to_string()))?,
        )
        .map_err(|e| CpceError::io(side.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<(TrainState, TrainConfig)> {
        let arrays = container::load_container(path)?;
        let side = path.with_extension("json");
        let txt = std::fs::read_to_string(&side)
            .map_err(|e| CpceError::io(side.display().to_string(), e))?;
        let meta: CheckpointMeta = serde_json::from_str(&txt)
            .map_err(|e| CpceError::config(format!("{}: {e}", side.display())))?;

        let mut generator =
            build_generator_with_channels(meta.gen_d, 0, meta.gen_channels)?;
        let gnames: Vec<String> = GeneratorParams::<f32>::layer_names()
            .into_iter()
            .flat_map(|n| [format!("g.{n}.weight"), format!("g.{n}.bias")])
            .collect();
        copy_named(&mut generator.param_slices_mut(), &gnames, &arrays)?;

        let cfg = meta.config.clone();
        let mut critic = build_discriminator_custom(
            &cfg.critic_channels,
            cfg.critic_fc1,
            meta.critic_input_hw,
            0,
        );
        let dnames: Vec<String> = (1..=cfg.critic_channels.len())
            .flat_map(|i| [format!("d_conv{i}.weight"), format!("d_conv{i}.bias")])
            .chain([
                "d_fc1.weight".to_string(),
                "d_fc1.bias".to_string(),
                "d_fc2.weight".to_string(),
                "d_fc2.bias".to_string(),
            ])
            .collect();
        copy_named(&mut critic.param_slices_mut(), &dnames, &arrays)?;

        let mut g_opt = Adam::for_params(&generator.param_slices(), cfg.beta1, cfg.beta2);
        let mut d_opt = Adam::for_params(&critic.param_slices(), cfg.beta1, cfg.beta2);
        Self::load_moments("g_opt", &mut g_opt, &arrays)?;
        Self::load_moments("d_opt", &mut d_opt, &arrays)?;
        g_opt.t = meta.adam_t[0];
        d_opt.t = meta.adam_t[1];

        Ok((
            TrainState {
                generator,
                critic,
                g_opt,
                d_opt,
                epoch: meta.epoch,
                step: meta.step,
                history: meta.history,
            },
            cfg,
        ))
    }
}

#[derive(Serialize, Deserialize)]
struct GenMeta {
    gen_d: usize,
    gen_channels: usize,
}

/// Writes a generator-only checkpoint (no critic or optimizer state).
pub fn save_generator(path: &Path, g: &GeneratorParams) -> Result<()> {
    let arrays: Vec<(String, ArrayD<f32>)> = g
        .named_arrays()
        .into_iter()
        .map(|(n, a)| (format!("g.{n}"), a))
        .collect();
    container::save_container(path, &arrays)?;
    let meta = GenMeta {
        gen_d: g.input_d(),
        gen_channels: g.channels,
    };
    let side = path.with_extension("json");
    std::fs::write(&side, serde_json::to_string_pretty(&meta).unwrap())
        .map_err(|e| CpceError::io(side.display().to_string(), e))
}

/// Loads the generator from either a generator-only checkpoint or a full
/// training checkpoint; both carry `gen_d`/`gen_channels` in the sidecar.
pub fn load_generator(path: &Path) -> Result<GeneratorParams> {
    let arrays = container::load_container(path)?;
    let side = path.with_extension("json");
    let txt = std::fs::read_to_string(&side)
        .map_err(|e| CpceError::io(side.display().to_string(), e))?;
    let meta: serde_json::Value = serde_json::from_str(&txt)
        .map_err(|e| CpceError::config(format!("{}: {e}", side.display())))?;
    let get = |key: &str| -> Result<usize> {
        meta.get(key)
            .and_then(|v| v.as_u64())
            .map(|v| v as usize)
            .ok_or_else(|| {
                CpceError::config(format!("{}: missing `{key}`", side.display()))
            })
    };
    let mut g = build_generator_with_channels(get("gen_d")?, 0, get("gen_channels")?)?;
    let names: Vec<String> = GeneratorParams::<f32>::layer_names()
        .into_iter()
        .flat_map(|n| [format!("g.{n}.weight"), format!("g.{n}.bias")])
        .collect();
    copy_named(&mut g.param_slices_mut(), &names, &arrays)?;
    Ok(g)
}

// ---------------------------------------------------------------------------
// Batch assembly
// ---------------------------------------------------------------------------

fn assemble_batch(pairs: &[PatchPair], idx: &[usize]) -> (Tensor, Tensor) {
    let d = pairs[idx[0]].lowdose.d();
    let p = pairs[idx[0]].normaldose.shape()[0];
    let b = idx.len();
    let mut ld = Tensor::zeros((b, 1, d, p, p));
    let mut nd = Tensor::zeros((b, 1, 1, p, p));
    for (bi, &i) in idx.iter().enumerate() {
        ld.slice_mut(ndarray::s![bi, 0, .., .., ..])
            .assign(&pairs[i].lowdose.data);
        nd.slice_mut(ndarray::s![bi, 0, 0, .., ..])
            .assign(&pairs[i].normaldose);
    }
    (ld, nd)
}

fn check_finite(val: f64, what: &str, context: &str) -> Result<()> {
    if !val.is_finite() {
        return Err(CpceError::Numerical(format!(
            "{what} is {val} ({context}); aborting"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Steps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct CriticStepOut {
    pub loss: f64,
    pub wasserstein: f64,
    pub gp: f64,
}

fn add_grads(into: &mut CriticGrads, from: &CriticGrads) {
    let mut dst = into.param_slices_mut();
    let src = from.param_slices();
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        for (x, y) in d.iter_mut().zip(s.iter()) {
            *x += *y;
        }
    }
}

/// One Adam update on the critic against
/// `mean D(fake) − mean D(real) + λ·GP`; the generator is untouched.
pub fn critic_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    ld_batch: &Tensor,
    nd_batch: &Tensor,
    rng: &mut ChaCha20Rng,
    lr: f32,
) -> Result<CriticStepOut> {
    let b = ld_batch.shape()[0];
    let bf = b as f32;

    let fake = generator_forward_batch(&state.generator, ld_batch)?;

    // value terms
    let (vals_f, cache_f) = critic_forward_cached(&state.critic, &fake)?;
    let (vals_r, cache_r) = critic_forward_cached(&state.critic, nd_batch)?;
    let dplus = Array1::from_elem(b, 1.0 / bf);
    let dminus = Array1::from_elem(b, -1.0 / bf);
    let (gf, _) = critic_backward(&state.critic, &cache_f, &dplus, true, false);
    let (gr, _) = critic_backward(&state.critic, &cache_r, &dminus, true, false);
    let mut grads = gf.unwrap();
    add_grads(&mut grads, &gr.unwrap());

    // gradient penalty: forward-over-reverse for the parameter gradient
    let eps = Array1::from_shape_fn(b, |_| rng.gen_range(0.0f32..1.0));
    let interp = losses::interpolate(&fake, nd_batch, &eps);
    let (_, cache_i) = critic_forward_cached(&state.critic, &interp)?;
    let ones = Array1::ones(b);
    let g_input = critic_input_grad(&state.critic, &cache_i, &ones);
    let n = g_input.len() / b;
    let gs = g_input.as_slice().unwrap();
    let mut gp = 0.0f64;
    let mut tangent_dir = Tensor::zeros(g_input.raw_dim());
    {
        let ts = tangent_dir.as_slice_mut().unwrap();
        for bi in 0..b {
            let row = &gs[bi * n..(bi + 1) * n];
            let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            gp += (norm - 1.0).powi(2);
            if norm > 0.0 {
                // d/dg of λ(‖g‖−1)²/B = 2λ(‖g‖−1)/(B‖g‖) · g
                let c = (2.0 * cfg.lambda_gp as f64 * (norm - 1.0) / (bf as f64 * norm)) as f32;
                for (t, &v) in ts[bi * n..(bi + 1) * n].iter_mut().zip(row.iter()) {
                    *t = c * v;
                }
            }
        }
    }
    gp = cfg.lambda_gp as f64 * gp / bf as f64;
    let tan = critic_jvp(&state.critic, &cache_i, &tangent_dir);
    let gp_grads = critic_tangent_param_grads(&state.critic, &cache_i, &tan);
    add_grads(&mut grads, &gp_grads);

    let mean_f = vals_f.sum() as f64 / bf as f64;
    let mean_r = vals_r.sum() as f64 / bf as f64;
    let loss = mean_f - mean_r + gp;
    check_finite(
        loss,
        "critic loss",
        &format!("mean_fake={mean_f} mean_real={mean_r} gp={gp}"),
    )?;

    let gslices = grads.param_slices();
    state
        .d_opt
        .step(lr, &mut state.critic.param_slices_mut(), &gslices);
    Ok(CriticStepOut {
        loss,
        wasserstein: (mean_r - mean_f).abs(),
        gp,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct GenStepOut {
    pub adversarial: f64,
    pub perceptual: f64,
    pub combined: f64,
}

/// One Adam update on the generator against `L_a + λ_p·L_p`; critic and
/// extractor are untouched.
pub fn generator_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    extractor: &FeatureExtractor,
    reduction: Reduction,
    ld_batch: &Tensor,
    nd_batch: &Tensor,
    lr: f32,
) -> Result<GenStepOut> {
    let b = ld_batch.shape()[0];
    let bf = b as f32;
    let (fake, gcache) = generator_forward_cached(&state.generator, ld_batch)?;

    let (vals, dcache) = critic_forward_cached(&state.critic, &fake)?;
    let adv = vals.sum() as f64 / bf as f64;
    let dvals = Array1::from_elem(b, 1.0 / bf);
    let mut dfake = critic_input_grad(&state.critic, &dcache, &dvals);

    let (pl, pl_grad) =
        perceptual_loss_and_grad(extractor, &fake, nd_batch, reduction, true)?;
    dfake.scaled_add(cfg.lambda_p, pl_grad.as_ref().unwrap());

    let combined = adv + cfg.lambda_p as f64 * pl as f64;
    check_finite(combined, "generator loss", &format!("adv={adv} pl={pl}"))?;

    let grads = generator_backward(&state.generator, &gcache, &dfake);
    let gslices = grads.param_slices();
    state
        .g_opt
        .step(lr, &mut state.generator.param_slices_mut(), &gslices);
    Ok(GenStepOut {
        adversarial: adv,
        perceptual: pl as f64,
        combined,
    })
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// (perceptual loss, |Wasserstein estimate|, MSE) over the validation
/// split, evaluated in deterministic chunk order.
pub fn validate(
    generator: &GeneratorParams,
    critic: &DiscriminatorParams,
    extractor: &FeatureExtractor,
    reduction: Reduction,
    val: &[PatchPair],
    chunk: usize,
    mode: ExecMode,
) -> Result<HistoryRow> {
    if val.is_empty() {
        return Err(CpceError::config("validation split is empty"));
    }
    let idx: Vec<usize> = (0..val.len()).collect();
    let chunks: Vec<&[usize]> = idx.chunks(chunk.max(1)).collect();
    let results: Vec<Result<(f64, f64, f64, f64, usize)>> =
        crate::exec::map_indexed(mode, chunks.len(), |ci| {
            let (ld, nd) = assemble_batch(val, chunks[ci]);
            let fake = generator_forward_batch(generator, &ld)?;
            let pl = losses::perceptual_loss(extractor, &fake, &nd, reduction)? as f64;
            let vf = crate::model::critic_values(critic, &fake)?;
            let vr = crate::model::critic_values(critic, &nd)?;
            let mse = fake
                .iter()
                .zip(nd.iter())
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
                / fake.len() as f64;
            Ok((
                pl * chunks[ci].len() as f64,
                vf.sum() as f64,
                vr.sum() as f64,
                mse * chunks[ci].len() as f64,
                chunks[ci].len(),
            ))
        });
    let (mut pl, mut sf, mut sr, mut mse, mut n) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for r in results {
        let (a, b, c, d, k) = r?;
        pl += a;
        sf += b;
        sr += c;
        mse += d;
        n += k;
    }
    let nf = n as f64;
    Ok(HistoryRow {
        step: 0,
        pl: pl / nf,
        wd: (sr / nf - sf / nf).abs(),
        mse: mse / nf,
    })
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

pub struct Dataset {
    pub train: Vec<PatchPair>,
    pub val: Vec<PatchPair>,
}

pub enum Init {
    Scratch { d: usize },
    /// Pre-built generator (e.g. an inflated 2D model). The learning rate
    /// is halved relative to `cfg.lr`.
    Transfer { generator: GeneratorParams },
}

/// Runs the full alternating loop: within each epoch the shuffled batch
/// stream is consumed in groups of `n_critic` critic steps followed by one
/// generator step. Validation is recorded at step 0 and every
/// `eval_every` fraction of an epoch; checkpoints (if `out_dir` is given)
/// are written per epoch.
pub fn train(
    cfg: &TrainConfig,
    data: &Dataset,
    init: Init,
    extractor: &FeatureExtractor,
    reduction: Reduction,
    mode: ExecMode,
    out_dir: Option<&Path>,
) -> Result<TrainState> {
    if data.train.is_empty() || data.val.is_empty() {
        return Err(CpceError::config("train and validation splits must be nonempty"));
    }
    let patch = data.train[0].normaldose.shape()[0];
    let d_data = data.train[0].lowdose.d();
    let (generator, transfer) = match init {
        Init::Scratch { d } => (
            build_generator_with_channels(d, cfg.seed ^ 0x6E6_0000, 32)?,
            false,
        ),
        Init::Transfer { generator } => (generator, true),
    };
    if generator.input_d() != d_data {
        return Err(CpceError::config(format!(
            "generator expects {} slices but dataset provides {d_data}",
            generator.input_d()
        )));
    }
    let base_lr = if transfer { cfg.lr / 2.0 } else { cfg.lr };
    let mut state = TrainState::new(generator, cfg, patch);

    let n_batches = data.train.len() / cfg.batch_size;
    if n_batches == 0 {
        return Err(CpceError::config(format!(
            "batch size {} exceeds training set size {}",
            cfg.batch_size,
            data.train.len()
        )));
    }
    let eval_stride = ((cfg.eval_every * n_batches as f64).round() as usize).max(1);

    let record = |state: &mut TrainState| -> Result<()> {
        let mut row = validate(
            &state.generator,
            &state.critic,
            extractor,
            reduction,
            &data.val,
            cfg.batch_size,
            mode,
        )?;
        row.step = state.step;
        log::info!(
            "step {} | val pl {:.6} wd {:.6} mse {:.6}",
            row.step,
            row.pl,
            row.wd,
            row.mse
        );
        state.history.push(row);
        Ok(())
    };

    record(&mut state)?;
    for epoch in 1..=cfg.epochs {
        let lr = match cfg.lr_decay {
            LrDecay::OneOverT => base_lr / epoch as f32,
            LrDecay::None => base_lr,
        };
        // derived per-epoch stream keeps runs resumable without RNG state
        let mut rng =
            ChaCha20Rng::seed_from_u64(cfg.seed.wrapping_add(0x9E37_79B9 * epoch as u64));
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);

        for (bi, idx) in order.chunks(cfg.batch_size).take(n_batches).enumerate() {
            let (ld, nd) = assemble_batch(&data.train, idx);
            let group = cfg.n_critic + 1;
            if bi % group < cfg.n_critic {
                let out = critic_step(&mut state, cfg, &ld, &nd, &mut rng, lr)?;
                log::debug!("epoch {epoch} batch {bi} critic loss {:.6}", out.loss);
            } else {
                let out = generator_step(&mut state, cfg, extractor, reduction, &ld, &nd, lr)?;
                log::debug!(
                    "epoch {epoch} batch {bi} gen adv {:.6} pl {:.6}",
                    out.adversarial,
                    out.perceptual
                );
            }
            state.step += 1;
            if state.step % eval_stride as u64 == 0 {
                record(&mut state)?;
            }
        }
        state.epoch = epoch;
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)
                .map_err(|e| CpceError::io(dir.display().to_string(), e))?;
            state.save(&dir.join(format!("epoch_{epoch:03}.cpce")), cfg)?;
            std::fs::write(dir.join("history.csv"), history_to_csv(&state.history))
                .map_err(|e| CpceError::io(dir.display().to_string(), e))?;
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io_data::{extract_patches, generate_phantom_volume, simulate_low_dose, NoiseParams, PhantomParams};
    use crate::model::build_generator;

    fn tiny_dataset(d: usize, n_train: usize, n_val: usize, patch: usize) -> Dataset {
        let nd = generate_phantom_volume(3, 6, 64, 64, &PhantomParams::default()).unwrap();
        let ld = simulate_low_dose(&nd, &NoiseParams::default(), 4).unwrap();
        let train = extract_patches(&ld, &nd, 0, d, n_train, patch, 5).unwrap();
        let val = extract_patches(&ld, &nd, 0, d, n_val, patch, 6).unwrap();
        Dataset { train, val }
    }

    fn tiny_config(seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            epochs: 1,
            critic_channels: vec![4, 4, 8, 8],
            critic_fc1: 8,
            ..TrainConfig::default()
        }
        .with_seed(seed)
    }

    impl TrainConfig {
        fn with_seed(mut self, seed: u64) -> Self {
            self.seed = seed;
            self
        }
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // minimize (x-3)^2 + (y+1)^2
        let mut p = vec![0.0f32, 0.0];
        let mut opt = Adam::new(&[2], 0.9, 0.999);
        for _ in 0..2000 {
            let g = vec![2.0 * (p[0] - 3.0), 2.0 * (p[1] + 1.0)];
            let mut ps = [&mut p[..]];
            opt.step(0.05, &mut ps, &[&g]);
        }
        assert!((p[0] - 3.0).abs() < 1e-2 && (p[1] + 1.0).abs() < 1e-2, "{p:?}");
    }

    #[test]
    fn critic_step_moves_critic_only_and_is_seeded() {
        let ds = tiny_dataset(1, 16, 8, 32);
        let cfg = tiny_config(7);
        let gen = build_generator::<f32>(1, 1).unwrap();
        let mut a = TrainState::new(gen.clone(), &cfg, 32);
        let mut b = TrainState::new(gen.clone(), &cfg, 32);
        let (ld, nd) = assemble_batch(&ds.train, &[0, 1, 2, 3]);
        let mut r1 = ChaCha20Rng::seed_from_u64(9);
        let mut r2 = ChaCha20Rng::seed_from_u64(9);
        let o1 = critic_step(&mut a, &cfg, &ld, &nd, &mut r1, 1e-4).unwrap();
        let o2 = critic_step(&mut b, &cfg, &ld, &nd, &mut r2, 1e-4).unwrap();
        assert_eq!(o1.loss, o2.loss);
        assert_eq!(a.critic.param_slices(), b.critic.param_slices());
        // generator untouched
        assert_eq!(a.generator.param_slices(), gen.param_slices());
        // critic changed
        let fresh = TrainState::new(gen.clone(), &cfg, 32);
        assert_ne!(a.critic.param_slices(), fresh.critic.param_slices());
    }

    #[test]
    fn critic_step_increases_value_gap_on_fixed_batch() {
        let ds = tiny_dataset(1, 16, 8, 32);
        let mut cfg = tiny_config(11);
        cfg.lambda_gp = 0.0;
        let gen = build_generator::<f32>(1, 2).unwrap();
        let mut st = TrainState::new(gen, &cfg, 32);
        let (ld, nd) = assemble_batch(&ds.train, &[0, 1, 2, 3]);
        let fake = generator_forward_batch(&st.generator, &ld).unwrap();
        let gap = |st: &TrainState| {
            let vf = crate::model::critic_values(&st.critic, &fake).unwrap();
            let vr = crate::model::critic_values(&st.critic, &nd).unwrap();
            (vr.sum() - vf.sum()) as f64 / 4.0
        };
        let before = gap(&st);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for _ in 0..30 {
            critic_step(&mut st, &cfg, &ld, &nd, &mut rng, 1e-3).unwrap();
        }
        let after = gap(&st);
        assert!(after > before, "gap {before} -> {after}");
    }

    #[test]
    fn generator_step_reduces_perceptual_loss_with_zero_critic() {
        let ds = tiny_dataset(1, 16, 8, 32);
        let mut cfg = tiny_config(13);
        cfg.lambda_p = 1.0;
        let gen = build_generator::<f32>(1, 3).unwrap();
        let mut st = TrainState::new(gen, &cfg, 32);
        for s in st.critic.param_slices_mut() {
            for v in s.iter_mut() {
                *v = 0.0;
            }
        }
        let ex = FeatureExtractor::seeded_random_convnet(2);
        let (ld, nd) = assemble_batch(&ds.train, &[0, 1, 2, 3]);
        let first = generator_step(&mut st, &cfg, &ex, Reduction::Mean, &ld, &nd, 1e-3).unwrap();
        let mut last = first;
        for _ in 0..20 {
            last = generator_step(&mut st, &cfg, &ex, Reduction::Mean, &ld, &nd, 1e-3).unwrap();
        }
        assert!(
            last.perceptual < first.perceptual,
            "pl {} -> {}",
            first.perceptual,
            last.perceptual
        );
        // frozen critic (D == 0) stayed zero; extractor is by-ref immutable
        assert!(st.critic.param_slices().iter().all(|s| s.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn train_is_deterministic_and_emits_history() {
        let ds = tiny_dataset(1, 24, 8, 32);
        let cfg = tiny_config(21);
        let ex = FeatureExtractor::seeded_random_convnet(3);
        let run = || {
            train(
                &cfg,
                &ds,
                Init::Scratch { d: 1 },
                &ex,
                Reduction::Mean,
                ExecMode::Sequential,
                None,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(history_to_csv(&a.history), history_to_csv(&b.history));
        assert!(a.history.len() >= 2, "{} rows", a.history.len());
        assert_eq!(a.history[0].step, 0);
        assert_eq!(a.generator.param_slices(), b.generator.param_slices());
        let parsed = history_from_csv(&history_to_csv(&a.history)).unwrap();
        assert_eq!(parsed, a.history);
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise_and_resumable() {
        let ds = tiny_dataset(1, 16, 8, 32);
        let cfg = tiny_config(31);
        let ex = FeatureExtractor::seeded_random_convnet(4);
        let st = train(
            &cfg,
            &ds,
            Init::Scratch { d: 1 },
            &ex,
            Reduction::Mean,
            ExecMode::Sequential,
            None,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.cpce");
        st.save(&path, &cfg).unwrap();
        let (mut back, cfg2) = TrainState::load(&path).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(back.generator.param_slices(), st.generator.param_slices());
        assert_eq!(back.critic.param_slices(), st.critic.param_slices());
        assert_eq!(back.g_opt.m, st.g_opt.m);
        assert_eq!(back.d_opt.v, st.d_opt.v);
        assert_eq!(back.history, st.history);

        // one step after load == one step without save/load
        let mut orig = st;
        let (ld, nd) = assemble_batch(&ds.train, &[0, 1, 2, 3]);
        let mut r1 = ChaCha20Rng::seed_from_u64(5);
        let mut r2 = ChaCha20Rng::seed_from_u64(5);
        critic_step(&mut orig, &cfg, &ld, &nd, &mut r1, 1e-4).unwrap();
        critic_step(&mut back, &cfg, &ld, &nd, &mut r2, 1e-4).unwrap();
        assert_eq!(orig.critic.param_slices(), back.critic.param_slices());
    }

    #[test]
    fn transfer_init_starts_at_source_metrics_and_halves_lr() {
        // 2D source, then a d=3 transfer run on matched patches: the
        // step-0 validation PL/MSE must equal the source's final values.
        let nd = generate_phantom_volume(41, 6, 64, 64, &PhantomParams::default()).unwrap();
        let ld = simulate_low_dose(&nd, &NoiseParams::default(), 42).unwrap();
        let mk = |d: usize| Dataset {
            train: extract_patches(&ld, &nd, 0, d, 24, 32, 50).unwrap(),
            val: extract_patches(&ld, &nd, 0, d, 8, 32, 51).unwrap(),
        };
        let ds2 = mk(1);
        let ds3 = mk(3);
        let cfg = tiny_config(43);
        let ex = FeatureExtractor::seeded_random_convnet(5);
        let st2 = train(
            &cfg,
            &ds2,
            Init::Scratch { d: 1 },
            &ex,
            Reduction::Mean,
            ExecMode::Sequential,
            None,
        )
        .unwrap();
        let final2 = *st2.history.last().unwrap();
        let inflated = crate::transfer::inflate_generator(&st2.generator, 3).unwrap();
        let st3 = train(
            &cfg,
            &ds3,
            Init::Transfer { generator: inflated },
            &ex,
            Reduction::Mean,
            ExecMode::Sequential,
            None,
        )
        .unwrap();
        let start3 = st3.history[0];
        assert!(
            (start3.pl - final2.pl).abs() < 1e-4,
            "pl {} vs {}",
            start3.pl,
            final2.pl
        );
        assert!(
            (start3.mse - final2.mse).abs() < 1e-4,
            "mse {} vs {}",
            start3.mse,
            final2.mse
        );
    }

    #[test]
    fn d_mismatch_and_empty_split_rejected() {
        let ds = tiny_dataset(3, 16, 8, 32);
        let cfg = tiny_config(61);
        let ex = FeatureExtractor::seeded_random_convnet(6);
        assert!(train(
            &cfg,
            &ds,
            Init::Scratch { d: 1 },
            &ex,
            Reduction::Mean,
            ExecMode::Sequential,
            None
        )
        .is_err());
        let empty = Dataset {
            train: vec![],
            val: vec![],
        };
        assert!(train(
            &cfg,
            &empty,
            Init::Scratch { d: 1 },
            &ex,
            Reduction::Mean,
            ExecMode::Sequential,
            None
        )
        .is_err());
    }
}
