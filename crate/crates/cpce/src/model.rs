//! The CPCE generator (2D and hybrid 2D/3D) and the critic, as pure
//! forward/backward functions over explicit parameter containers.
//!
//! Generator topology: 4 valid 3x3 convolutions (the first layers may be
//! volumetric 3x3x3 per the depth schedule), then 4 stride-1 transposed
//! convolutions. Three conveying paths concatenate the center depth plane
//! of an encoder activation onto the equally-sized decoder activation,
//! each followed by a 1x1 bottleneck back to the base channel width.
//! Every (de)convolutional layer, bottlenecks included, is followed by
//! ReLU.
//!
//! Everything is generic over the element type (`f32` in production,
//! `f64` for finite-difference gradient checks).

use ndarray::{Array1, Array2, Array3, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{CpceError, Result};
use crate::ops::{self, Tensor};
use crate::scalar::Scalar;

pub const MIN_SPATIAL: usize = 17;
pub const CRITIC_PATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthMode {
    Planar,
    Volumetric,
}

/// A stack of `d` adjacent CT slices (d odd), normalized to [0,1].
/// `d = 1` is the pure 2D case.
#[derive(Debug, Clone)]
pub struct SliceStack {
    pub data: Array3<f32>,
    pub spacing_mm: Option<f32>,
}

impl SliceStack {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let d = data.shape()[0];
        if d % 2 == 0 || !(1..=9).contains(&d) {
            return Err(CpceError::config(format!(
                "slice count must be odd and in 1..=9, got {d}"
            )));
        }
        Ok(SliceStack {
            data,
            spacing_mm: None,
        })
    }

    pub fn d(&self) -> usize {
        self.data.shape()[0]
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer<T = f32> {
    /// `[c_in, c_out, k_d, k_h, k_w]`
    pub weight: Tensor<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> ConvLayer<T> {
    fn zeros_like(&self) -> Self {
        ConvLayer {
            weight: Tensor::<T>::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
        }
    }
}

fn he_conv<T: Scalar>(
    rng: &mut ChaCha20Rng,
    ci: usize,
    co: usize,
    kd: usize,
    kh: usize,
    kw: usize,
) -> ConvLayer<T> {
    let std = T::from_f64((2.0 / (ci * kd * kh * kw) as f64).sqrt());
    let weight = Tensor::<T>::from_shape_fn((ci, co, kd, kh, kw), |_| T::std_normal(rng) * std);
    ConvLayer {
        weight,
        bias: Array1::zeros(co),
    }
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GeneratorParams<T = f32> {
    pub conv: [ConvLayer<T>; 4],
    pub deconv: [ConvLayer<T>; 4],
    pub bottleneck: [ConvLayer<T>; 3],
    pub depth_schedule: [DepthMode; 4],
    /// Base channel width; 32 in the reference configuration.
    pub channels: usize,
}

fn schedule_for(d: usize) -> Result<[DepthMode; 4]> {
    if d % 2 == 0 || !(1..=9).contains(&d) {
        return Err(CpceError::config(format!(
            "slice count must be odd and in {{1,3,5,7,9}}, got {d}"
        )));
    }
    let n_vol = (d - 1) / 2;
    let mut sched = [DepthMode::Planar; 4];
    for s in sched.iter_mut().take(n_vol) {
        *s = DepthMode::Volumetric;
    }
    Ok(sched)
}

/// Builds a seeded CPCE generator for `d` input slices at the reference
/// channel width of 32.
pub fn build_generator<T: Scalar>(d: usize, seed: u64) -> Result<GeneratorParams<T>> {
    build_generator_with_channels(d, seed, 32)
}

/// Same as [`build_generator`] with a configurable channel width, used by
/// the reduced networks in gradient-check tests.
pub fn build_generator_with_channels<T: Scalar>(
    d: usize,
    seed: u64,
    channels: usize,
) -> Result<GeneratorParams<T>> {
    let depth_schedule = schedule_for(d)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let c = channels;
    let kd = |i: usize| match depth_schedule[i] {
        DepthMode::Volumetric => 3,
        DepthMode::Planar => 1,
    };
    let conv = [
        he_conv(&mut rng, 1, c, kd(0), 3, 3),
        he_conv(&mut rng, c, c, kd(1), 3, 3),
        he_conv(&mut rng, c, c, kd(2), 3, 3),
        he_conv(&mut rng, c, c, kd(3), 3, 3),
    ];
    let deconv = [
        he_conv(&mut rng, c, c, 1, 3, 3),
        he_conv(&mut rng, c, c, 1, 3, 3),
        he_conv(&mut rng, c, c, 1, 3, 3),
        he_conv(&mut rng, c, 1, 1, 3, 3),
    ];
    let bottleneck = [
        he_conv(&mut rng, 2 * c, c, 1, 1, 1),
        he_conv(&mut rng, 2 * c, c, 1, 1, 1),
        he_conv(&mut rng, 2 * c, c, 1, 1, 1),
    ];
    Ok(GeneratorParams {
        conv,
        deconv,
        bottleneck,
        depth_schedule,
        channels: c,
    })
}

impl<T: Scalar> GeneratorParams<T> {
    /// Slice count this generator expects: 1 + 2 * (volumetric layers).
    pub fn input_d(&self) -> usize {
        1 + 2 * self
            .depth_schedule
            .iter()
            .filter(|m| **m == DepthMode::Volumetric)
            .count()
    }

    /// Feature-map depth after each encoder convolution.
    pub fn depth_trace(&self) -> Vec<usize> {
        let mut d = self.input_d();
        self.depth_schedule
            .iter()
            .map(|m| {
                if *m == DepthMode::Volumetric {
                    d -= 2;
                }
                d
            })
            .collect()
    }

    pub fn zeros_like(&self) -> Self {
        GeneratorParams {
            conv: std::array::from_fn(|i| self.conv[i].zeros_like()),
            deconv: std::array::from_fn(|i| self.deconv[i].zeros_like()),
            bottleneck: std::array::from_fn(|i| self.bottleneck[i].zeros_like()),
            depth_schedule: self.depth_schedule,
            channels: self.channels,
        }
    }

    pub fn layer_names() -> Vec<String> {
        let mut names = Vec::new();
        for i in 1..=4 {
            names.push(format!("conv{i}"));
        }
        for i in 1..=4 {
            names.push(format!("deconv{i}"));
        }
        for i in 1..=3 {
            names.push(format!("bottleneck{i}"));
        }
        names
    }

    pub fn layers(&self) -> Vec<&ConvLayer<T>> {
        self.conv
            .iter()
            .chain(self.deconv.iter())
            .chain(self.bottleneck.iter())
            .collect()
    }

    pub fn layers_mut(&mut self) -> Vec<&mut ConvLayer<T>> {
        self.conv
            .iter_mut()
            .chain(self.deconv.iter_mut())
            .chain(self.bottleneck.iter_mut())
            .collect()
    }

    /// Flat views over every parameter array, in a fixed order
    /// (weight then bias per layer), for the optimizer.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        for layer in self.layers_mut() {
            out.push(layer.weight.as_slice_mut().unwrap());
            out.push(layer.bias.as_slice_mut().unwrap());
        }
        out
    }

    pub fn param_slices(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        for layer in self.layers() {
            out.push(layer.weight.as_slice().unwrap());
            out.push(layer.bias.as_slice().unwrap());
        }
        out
    }

    pub fn named_arrays(&self) -> Vec<(String, ArrayD<T>)> {
        let mut out = Vec::new();
        for (name, layer) in Self::layer_names().into_iter().zip(self.layers()) {
            out.push((format!("{name}.weight"), layer.weight.clone().into_dyn()));
            out.push((format!("{name}.bias"), layer.bias.clone().into_dyn()));
        }
        out
    }
}

/// Intermediate activations kept for the backward pass. All tensors are
/// post-ReLU.
pub struct GeneratorCache<T = f32> {
    pub input: Tensor<T>,
    pub enc: [Tensor<T>; 4],
    pub dec: [Tensor<T>; 3],
    pub cat: [Tensor<T>; 3],
    pub bott: [Tensor<T>; 3],
    pub output: Tensor<T>,
}

fn kernel_of<T: Scalar>(layer: &ConvLayer<T>) -> (usize, usize, usize) {
    let s = layer.weight.shape();
    (s[2], s[3], s[4])
}

/// Batched generator forward. Input `[b, 1, d, h, w]`, output `[b, 1, 1, h, w]`.
pub fn generator_forward_batch<T: Scalar>(
    params: &GeneratorParams<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    Ok(generator_forward_cached(params, x)?.0)
}

pub fn generator_forward_cached<T: Scalar>(
    params: &GeneratorParams<T>,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, GeneratorCache<T>)> {
    let s = x.shape();
    let (d, h, w) = (s[2], s[3], s[4]);
    if s[1] != 1 {
        return Err(CpceError::shape("generator input must have 1 channel"));
    }
    if d != params.input_d() {
        return Err(CpceError::config(format!(
            "input has {d} slices but depth schedule expects {}",
            params.input_d()
        )));
    }
    if h < MIN_SPATIAL || w < MIN_SPATIAL {
        return Err(CpceError::shape(format!(
            "input {h}x{w} is smaller than the {MIN_SPATIAL}x{MIN_SPATIAL} receptive field"
        )));
    }

    let mut cur = x.clone();
    let mut enc: Vec<Tensor<T>> = Vec::with_capacity(4);
    for layer in &params.conv {
        let mut a = ops::conv_fwd(&cur, &layer.weight, Some(&layer.bias), (1, 1))?;
        ops::relu_inplace(&mut a);
        enc.push(a.clone());
        cur = a;
    }
    debug_assert_eq!(cur.shape()[2], 1, "depth must reach 1 before the decoder");

    let mut dec: Vec<Tensor<T>> = Vec::with_capacity(3);
    let mut cat: Vec<Tensor<T>> = Vec::with_capacity(3);
    let mut bott: Vec<Tensor<T>> = Vec::with_capacity(3);
    // conveying paths pair equal spatial sizes: conv3, conv2, conv1
    for (i, skip_idx) in [(0usize, 2usize), (1, 1), (2, 0)] {
        let layer = &params.deconv[i];
        let mut dk = ops::deconv_fwd(&cur, &layer.weight, Some(&layer.bias))?;
        ops::relu_inplace(&mut dk);
        dec.push(dk.clone());
        let skip = ops::center_depth(&enc[skip_idx]);
        let c = ops::concat_channels(&dk, &skip);
        cat.push(c.clone());
        let bl = &params.bottleneck[i];
        let mut bk = ops::conv_fwd(&c, &bl.weight, Some(&bl.bias), (1, 1))?;
        ops::relu_inplace(&mut bk);
        bott.push(bk.clone());
        cur = bk;
    }
    let last = &params.deconv[3];
    let mut out = ops::deconv_fwd(&cur, &last.weight, Some(&last.bias))?;
    ops::relu_inplace(&mut out);

    let cache = GeneratorCache {
        input: x.clone(),
        enc: enc.try_into().map_err(|_| CpceError::shape("enc"))?,
        dec: dec.try_into().map_err(|_| CpceError::shape("dec"))?,
        cat: cat.try_into().map_err(|_| CpceError::shape("cat"))?,
        bott: bott.try_into().map_err(|_| CpceError::shape("bott"))?,
        output: out.clone(),
    };
    Ok((out, cache))
}

fn dims_of<T: Scalar>(x: &Tensor<T>) -> ops::ConvDims {
    ops::dims_of(x)
}

/// Embeds a depth-1 gradient into a zero tensor of depth `d` at the center
/// plane (adjoint of `center_depth`).
fn embed_center<T: Scalar>(g: &Tensor<T>, d: usize) -> Tensor<T> {
    let s = g.shape();
    let mut out = Tensor::<T>::zeros((s[0], s[1], d, s[3], s[4]));
    out.slice_mut(ndarray::s![.., .., d / 2..d / 2 + 1, .., ..])
        .assign(g);
    out
}

fn split_channels<T: Scalar>(g: &Tensor<T>, c: usize) -> (Tensor<T>, Tensor<T>) {
    let a = g
        .slice(ndarray::s![.., ..c, .., .., ..])
        .as_standard_layout()
        .to_owned();
    let b = g
        .slice(ndarray::s![.., c.., .., .., ..])
        .as_standard_layout()
        .to_owned();
    (a, b)
}

/// Backward pass through the generator. `dout` is the loss gradient with
/// respect to the (post-ReLU) output. Returns parameter gradients.
pub fn generator_backward<T: Scalar>(
    params: &GeneratorParams<T>,
    cache: &GeneratorCache<T>,
    dout: &Tensor<T>,
) -> GeneratorGrads<T> {
    let c = params.channels;
    let mut grads = params.zeros_like();

    let mut g = dout.clone();
    ops::relu_bwd_inplace(&mut g, &cache.output);
    let (dw, db) = ops::deconv_param_grad(&cache.bott[2], &g);
    grads.deconv[3].weight = dw;
    grads.deconv[3].bias = db;
    g = ops::deconv_input_grad(&g, &params.deconv[3].weight).expect("deconv4 grad");

    // skip-path gradients flowing into the encoder activations
    let mut enc_grads: [Option<Tensor<T>>; 4] = [None, None, None, None];

    // decoder blocks in reverse: bottleneck k, deconv k (k = 3, 2, 1)
    for (i, skip_idx) in [(2usize, 0usize), (1, 1), (0, 2)] {
        ops::relu_bwd_inplace(&mut g, &cache.bott[i]);
        let (dw, db) = ops::conv_param_grad(&cache.cat[i], &g, (1, 1, 1), (1, 1));
        grads.bottleneck[i].weight = dw;
        grads.bottleneck[i].bias = db;
        g = ops::conv_input_grad(&g, &params.bottleneck[i].weight, dims_of(&cache.cat[i]), (1, 1));
        let (mut gd, gskip) = split_channels(&g, c);
        let enc_d = cache.enc[skip_idx].shape()[2];
        enc_grads[skip_idx] = Some(embed_center(&gskip, enc_d));

        ops::relu_bwd_inplace(&mut gd, &cache.dec[i]);
        let below = if i == 0 { &cache.enc[3] } else { &cache.bott[i - 1] };
        let (dw, db) = ops::deconv_param_grad(below, &gd);
        grads.deconv[i].weight = dw;
        grads.deconv[i].bias = db;
        g = ops::deconv_input_grad(&gd, &params.deconv[i].weight).expect("deconv grad");
    }

    // encoder in reverse; g currently holds the main-path gradient at enc[3]
    for i in (0..4).rev() {
        if let Some(sg) = &enc_grads[i] {
            g += sg;
        }
        ops::relu_bwd_inplace(&mut g, &cache.enc[i]);
        let below = if i == 0 { &cache.input } else { &cache.enc[i - 1] };
        let kernel = kernel_of(&params.conv[i]);
        let (dw, db) = ops::conv_param_grad(below, &g, kernel, (1, 1));
        grads.conv[i].weight = dw;
        grads.conv[i].bias = db;
        if i > 0 {
            g = ops::conv_input_grad(&g, &params.conv[i].weight, dims_of(&cache.enc[i - 1]), (1, 1));
        }
    }
    grads
}

pub type GeneratorGrads<T = f32> = GeneratorParams<T>;

/// Single-stack forward pass; returns the denoised center slice `[h, w]`.
pub fn generator_forward(params: &GeneratorParams, input: &SliceStack) -> Result<Array2<f32>> {
    let s = input.data.shape();
    let x = input
        .data
        .clone()
        .into_shape_with_order((1, 1, s[0], s[1], s[2]))
        .map_err(|e| CpceError::shape(e.to_string()))?;
    let y = generator_forward_batch(params, &x)?;
    let (sh, sw) = (y.shape()[3], y.shape()[4]);
    y.into_shape_with_order((sh, sw))
        .map_err(|e| CpceError::shape(e.to_string()))
}

// ---------------------------------------------------------------------------
// Critic
// ---------------------------------------------------------------------------

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct FcLayer<T = f32> {
    /// `[out, in]`
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> FcLayer<T> {
    fn zeros_like(&self) -> Self {
        FcLayer {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
        }
    }
}

/// The 6-conv + 2-FC critic. Odd conv layers use stride 1, even layers
/// stride 2; every layer but the final FC is followed by leaky ReLU (0.2).
#[derive(Debug, Clone)]
pub struct DiscriminatorParams<T = f32> {
    pub conv: Vec<ConvLayer<T>>,
    pub fc1: FcLayer<T>,
    pub fc2: FcLayer<T>,
    /// Spatial input size the FC head was built for.
    pub input_hw: usize,
}

pub const CRITIC_CHANNELS: [usize; 6] = [64, 64, 128, 128, 256, 256];
pub const CRITIC_FC1: usize = 1024;

fn critic_spatial_after_convs(input_hw: usize, n_convs: usize) -> usize {
    let mut s = input_hw;
    for i in 0..n_convs {
        let stride = if i % 2 == 0 { 1 } else { 2 };
        s = (s - 3) / stride + 1;
    }
    s
}

/// Builds the reference critic for 64x64 patches.
pub fn build_discriminator<T: Scalar>(seed: u64) -> DiscriminatorParams<T> {
    build_discriminator_custom(&CRITIC_CHANNELS, CRITIC_FC1, CRITIC_PATCH, seed)
}

pub fn build_discriminator_custom<T: Scalar>(
    channels: &[usize],
    fc1_units: usize,
    input_hw: usize,
    seed: u64,
) -> DiscriminatorParams<T> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut conv = Vec::with_capacity(channels.len());
    let mut ci = 1;
    for &co in channels {
        conv.push(he_conv(&mut rng, ci, co, 1, 3, 3));
        ci = co;
    }
    let s = critic_spatial_after_convs(input_hw, channels.len());
    let flat = ci * s * s;
    let mk_fc = |rng: &mut ChaCha20Rng, out: usize, inp: usize| {
        let std = T::from_f64((2.0 / inp as f64).sqrt());
        FcLayer {
            weight: Array2::from_shape_fn((out, inp), |_| T::std_normal(rng) * std),
            bias: Array1::zeros(out),
        }
    };
    let fc1 = mk_fc(&mut rng, fc1_units, flat);
    let fc2 = mk_fc(&mut rng, 1, fc1_units);
    DiscriminatorParams {
        conv,
        fc1,
        fc2,
        input_hw,
    }
}

impl<T: Scalar> DiscriminatorParams<T> {
    pub fn zeros_like(&self) -> Self {
        DiscriminatorParams {
            conv: self.conv.iter().map(|l| l.zeros_like()).collect(),
            fc1: self.fc1.zeros_like(),
            fc2: self.fc2.zeros_like(),
            input_hw: self.input_hw,
        }
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        for l in &mut self.conv {
            out.push(l.weight.as_slice_mut().unwrap());
            out.push(l.bias.as_slice_mut().unwrap());
        }
        for fc in [&mut self.fc1, &mut self.fc2] {
            out.push(fc.weight.as_slice_mut().unwrap());
            out.push(fc.bias.as_slice_mut().unwrap());
        }
        out
    }

    pub fn param_slices(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        for l in &self.conv {
            out.push(l.weight.as_slice().unwrap());
            out.push(l.bias.as_slice().unwrap());
        }
        for fc in [&self.fc1, &self.fc2] {
            out.push(fc.weight.as_slice().unwrap());
            out.push(fc.bias.as_slice().unwrap());
        }
        out
    }

    pub fn named_arrays(&self) -> Vec<(String, ArrayD<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.conv.iter().enumerate() {
            out.push((format!("d_conv{}.weight", i + 1), l.weight.clone().into_dyn()));
            out.push((format!("d_conv{}.bias", i + 1), l.bias.clone().into_dyn()));
        }
        out.push(("d_fc1.weight".into(), self.fc1.weight.clone().into_dyn()));
        out.push(("d_fc1.bias".into(), self.fc1.bias.clone().into_dyn()));
        out.push(("d_fc2.weight".into(), self.fc2.weight.clone().into_dyn()));
        out.push(("d_fc2.bias".into(), self.fc2.bias.clone().into_dyn()));
        out
    }

    fn stride(i: usize) -> (usize, usize) {
        if i % 2 == 0 {
            (1, 1)
        } else {
            (2, 2)
        }
    }
}

pub type CriticGrads<T = f32> = DiscriminatorParams<T>;

/// Post-activation values of every critic layer, for backward passes.
pub struct CriticCache<T = f32> {
    pub input: Tensor<T>,
    pub conv_acts: Vec<Tensor<T>>,
    pub flat: Array2<T>,
    pub fc1_act: Array2<T>,
    pub values: Array1<T>,
}

fn flatten_batch<T: Scalar>(x: &Tensor<T>) -> Array2<T> {
    let s = x.shape();
    let n = s[1] * s[2] * s[3] * s[4];
    x.clone()
        .into_shape_with_order((s[0], n))
        .expect("flatten: standard layout")
}

fn unflatten_batch<T: Scalar>(x: &Array2<T>, like: &Tensor<T>) -> Tensor<T> {
    let s = like.shape();
    x.clone()
        .into_shape_with_order((s[0], s[1], s[2], s[3], s[4]))
        .expect("unflatten")
}

/// Batched critic forward. Input `[b, 1, 1, hw, hw]`; returns one scalar
/// per sample (no final activation).
pub fn critic_forward_cached<T: Scalar>(
    params: &DiscriminatorParams<T>,
    x: &Tensor<T>,
) -> Result<(Array1<T>, CriticCache<T>)> {
    let s = x.shape();
    if s[1] != 1 || s[2] != 1 || s[3] != params.input_hw || s[4] != params.input_hw {
        return Err(CpceError::shape(format!(
            "critic expects [b,1,1,{0},{0}] input, got {s:?}",
            params.input_hw
        )));
    }
    let slope = T::from_f64(LEAKY_SLOPE);
    let mut cur = x.clone();
    let mut conv_acts = Vec::with_capacity(params.conv.len());
    for (i, l) in params.conv.iter().enumerate() {
        let mut a = ops::conv_fwd(&cur, &l.weight, Some(&l.bias), DiscriminatorParams::<T>::stride(i))?;
        ops::leaky_relu_inplace(&mut a, slope);
        conv_acts.push(a.clone());
        cur = a;
    }
    let flat = flatten_batch(&cur);
    let mut fc1_act = ops::fc_fwd(&flat, &params.fc1.weight, &params.fc1.bias);
    for v in fc1_act.iter_mut() {
        if *v < T::zero() {
            *v = *v * slope;
        }
    }
    let out = ops::fc_fwd(&fc1_act, &params.fc2.weight, &params.fc2.bias);
    let values = out.column(0).to_owned();
    Ok((
        values.clone(),
        CriticCache {
            input: x.clone(),
            conv_acts,
            flat,
            fc1_act,
            values,
        },
    ))
}

/// Critic backward pass. `dvals[b]` seeds the per-sample output adjoint.
/// Computes parameter gradients and/or the input gradient.
pub fn critic_backward<T: Scalar>(
    params: &DiscriminatorParams<T>,
    cache: &CriticCache<T>,
    dvals: &Array1<T>,
    want_params: bool,
    want_input: bool,
) -> (Option<CriticGrads<T>>, Option<Tensor<T>>) {
    let slope = T::from_f64(LEAKY_SLOPE);
    let b = dvals.len();
    let mut grads = if want_params {
        Some(params.zeros_like())
    } else {
        None
    };

    let dy2 = dvals.clone().into_shape_with_order((b, 1)).unwrap();
    if let Some(g) = grads.as_mut() {
        let (dw, db) = ops::fc_param_grad(&cache.fc1_act, &dy2);
        g.fc2.weight = dw;
        g.fc2.bias = db;
    }
    let mut gfc = ops::fc_input_grad(&dy2, &params.fc2.weight);
    for (gv, &a) in gfc.iter_mut().zip(cache.fc1_act.iter()) {
        if a < T::zero() {
            *gv = *gv * slope;
        }
    }
    if let Some(g) = grads.as_mut() {
        let (dw, db) = ops::fc_param_grad(&cache.flat, &gfc);
        g.fc1.weight = dw;
        g.fc1.bias = db;
    }
    let gflat = ops::fc_input_grad(&gfc, &params.fc1.weight);
    let last = cache.conv_acts.last().unwrap();
    let mut g = unflatten_batch(&gflat, last);

    for i in (0..params.conv.len()).rev() {
        ops::leaky_relu_bwd_inplace(&mut g, &cache.conv_acts[i], slope);
        let below = if i == 0 {
            &cache.input
        } else {
            &cache.conv_acts[i - 1]
        };
        let stride = DiscriminatorParams::<T>::stride(i);
        if let Some(gr) = grads.as_mut() {
            let kernel = kernel_of(&params.conv[i]);
            let (dw, db) = ops::conv_param_grad(below, &g, kernel, stride);
            gr.conv[i].weight = dw;
            gr.conv[i].bias = db;
        }
        if i > 0 || want_input {
            g = ops::conv_input_grad(&g, &params.conv[i].weight, dims_of(below), stride);
        }
    }
    let input_grad = if want_input { Some(g) } else { None };
    (grads, input_grad)
}

/// Gradient of the critic output w.r.t. its input, one map per sample.
pub fn critic_input_grad<T: Scalar>(
    params: &DiscriminatorParams<T>,
    cache: &CriticCache<T>,
    dvals: &Array1<T>,
) -> Tensor<T> {
    critic_backward(params, cache, dvals, false, true).1.unwrap()
}

/// Directional (tangent / JVP) forward pass through the critic, with the
/// primal activations of `cache` supplying the activation masks. Returns
/// per-sample output tangents and the tangent activations.
pub struct CriticTangent<T = f32> {
    pub conv_tans: Vec<Tensor<T>>,
    pub flat: Array2<T>,
    pub fc1_tan: Array2<T>,
    pub out: Array1<T>,
    pub input: Tensor<T>,
}

pub fn critic_jvp<T: Scalar>(
    params: &DiscriminatorParams<T>,
    cache: &CriticCache<T>,
    v: &Tensor<T>,
) -> CriticTangent<T> {
    let slope = T::from_f64(LEAKY_SLOPE);
    let mut cur = v.clone();
    let mut conv_tans = Vec::with_capacity(params.conv.len());
    for (i, l) in params.conv.iter().enumerate() {
        let mut t = ops::conv_fwd(&cur, &l.weight, None, DiscriminatorParams::<T>::stride(i))
            .expect("jvp conv");
        // tangent through leaky ReLU: scale by f'(z), mask from the primal
        for (tv, &a) in t.iter_mut().zip(cache.conv_acts[i].iter()) {
            if a < T::zero() {
                *tv = *tv * slope;
            }
        }
        conv_tans.push(t.clone());
        cur = t;
    }
    let flat = flatten_batch(&cur);
    let mut fc1_tan = flat.dot(&params.fc1.weight.t());
    for (tv, &a) in fc1_tan.iter_mut().zip(cache.fc1_act.iter()) {
        if a < T::zero() {
            *tv = *tv * slope;
        }
    }
    let out2 = fc1_tan.dot(&params.fc2.weight.t());
    CriticTangent {
        conv_tans,
        flat,
        fc1_tan,
        out: out2.column(0).to_owned(),
        input: v.clone(),
    }
}

/// Parameter gradients of `sum_b tangent_out_b`: the reverse pass over the
/// tangent stream. Weight gradients pair output adjoints with tangent
/// activations; bias tangents are identically zero so biases receive no
/// gradient. This is the second-order piece of the WGAN-GP penalty.
pub fn critic_tangent_param_grads<T: Scalar>(
    params: &DiscriminatorParams<T>,
    cache: &CriticCache<T>,
    tan: &CriticTangent<T>,
) -> CriticGrads<T> {
    let slope = T::from_f64(LEAKY_SLOPE);
    let b = tan.out.len();
    let mut grads = params.zeros_like();
    let seed = Array2::<T>::ones((b, 1));

    let (dw, _) = ops::fc_param_grad(&tan.fc1_tan, &seed);
    grads.fc2.weight = dw;
    let mut gfc = ops::fc_input_grad(&seed, &params.fc2.weight);
    for (gv, &a) in gfc.iter_mut().zip(cache.fc1_act.iter()) {
        if a < T::zero() {
            *gv = *gv * slope;
        }
    }
    let (dw, _) = ops::fc_param_grad(&tan.flat, &gfc);
    grads.fc1.weight = dw;
    let gflat = ops::fc_input_grad(&gfc, &params.fc1.weight);
    let last = tan.conv_tans.last().unwrap();
    let mut g = unflatten_batch(&gflat, last);

    for i in (0..params.conv.len()).rev() {
        ops::leaky_relu_bwd_inplace(&mut g, &cache.conv_acts[i], slope);
        let below_tan = if i == 0 { &tan.input } else { &tan.conv_tans[i - 1] };
        let stride = DiscriminatorParams::<T>::stride(i);
        let kernel = kernel_of(&params.conv[i]);
        let (dw, _) = ops::conv_param_grad(below_tan, &g, kernel, stride);
        grads.conv[i].weight = dw;
        if i > 0 {
            g = ops::conv_input_grad(
                &g,
                &params.conv[i].weight,
                dims_of(&tan.conv_tans[i - 1]),
                stride,
            );
        }
    }
    grads
}

/// Scores a single 64x64 patch (or whatever size the critic was built for).
pub fn discriminator_forward(params: &DiscriminatorParams, patch: &Array2<f32>) -> Result<f32> {
    let s = patch.shape();
    let x = patch
        .clone()
        .into_shape_with_order((1, 1, 1, s[0], s[1]))
        .map_err(|e| CpceError::shape(e.to_string()))?;
    let (vals, _) = critic_forward_cached(params, &x)?;
    Ok(vals[0])
}

/// Batched critic forward over a stack of patches `[b, h, w]`.
pub fn critic_values<T: Scalar>(
    params: &DiscriminatorParams<T>,
    patches: &Tensor<T>,
) -> Result<Array1<T>> {
    Ok(critic_forward_cached(params, patches)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array, Array3, Axis};
    use rand::Rng;

    fn rand_stack(d: usize, h: usize, w: usize, seed: u64) -> SliceStack {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        SliceStack::new(Array3::from_shape_fn((d, h, w), |_| rng.gen_range(0.0f32..1.0))).unwrap()
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_output() {
        let p = build_generator::<f32>(1, 42).unwrap();
        let x = SliceStack::new(Array3::zeros((1, 64, 64))).unwrap();
        let y = generator_forward(&p, &x).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_size_matches_input_and_internal_sizes_shrink_grow() {
        let p = build_generator::<f32>(1, 7).unwrap();
        let x = rand_stack(1, 64, 64, 1);
        let xb = x
            .data
            .clone()
            .into_shape_with_order((1, 1, 1, 64, 64))
            .unwrap();
        let (y, cache) = generator_forward_cached(&p, &xb).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 64, 64]);
        let enc_sizes: Vec<usize> = cache.enc.iter().map(|t| t.shape()[3]).collect();
        assert_eq!(enc_sizes, vec![62, 60, 58, 56]);
        let dec_sizes: Vec<usize> = cache.dec.iter().map(|t| t.shape()[3]).collect();
        assert_eq!(dec_sizes, vec![58, 60, 62]);
    }

    #[test]
    fn impulse_support_is_17x17() {
        let p = build_generator::<f32>(1, 3).unwrap();
        let zero = SliceStack::new(Array3::zeros((1, 64, 64))).unwrap();
        let y0 = generator_forward(&p, &zero).unwrap();
        let mut data = Array3::zeros((1, 64, 64));
        data[[0, 32, 32]] = 1.0;
        let y1 = generator_forward(&p, &SliceStack::new(data).unwrap()).unwrap();
        for i in 0..64 {
            for j in 0..64 {
                let diff = (y1[[i, j]] - y0[[i, j]]).abs();
                let inside = (i as i64 - 32).abs() <= 8 && (j as i64 - 32).abs() <= 8;
                if !inside {
                    assert_eq!(diff, 0.0, "leak at ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn depth_trace_d9() {
        let p = build_generator::<f32>(9, 0).unwrap();
        assert_eq!(p.depth_trace(), vec![7, 5, 3, 1]);
        assert_eq!(p.depth_schedule, [DepthMode::Volumetric; 4]);
    }

    #[test]
    fn depth_schedule_d3() {
        let p = build_generator::<f32>(3, 0).unwrap();
        assert_eq!(
            p.depth_schedule,
            [
                DepthMode::Volumetric,
                DepthMode::Planar,
                DepthMode::Planar,
                DepthMode::Planar
            ]
        );
        assert_eq!(
            build_generator::<f32>(1, 0).unwrap().depth_schedule,
            [DepthMode::Planar; 4]
        );
    }

    #[test]
    fn invalid_d_rejected() {
        assert!(build_generator::<f32>(2, 0).is_err());
        assert!(build_generator::<f32>(11, 0).is_err());
        let p = build_generator::<f32>(3, 0).unwrap();
        let x = rand_stack(1, 64, 64, 2);
        assert!(generator_forward(&p, &x).is_err());
        let small = rand_stack(3, 16, 64, 3);
        assert!(generator_forward(&p, &small).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let p = build_generator::<f32>(3, 9).unwrap();
        let x = rand_stack(3, 32, 32, 4);
        let a = generator_forward(&p, &x).unwrap();
        let b = generator_forward(&p, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn output_nonnegative() {
        let p = build_generator::<f32>(1, 5).unwrap();
        let mut x = rand_stack(1, 32, 32, 6);
        x.data.mapv_inplace(|v| v * 2.0 - 1.0);
        let y = generator_forward(&p, &x).unwrap();
        assert!(y.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn translation_equivariance_interior() {
        let p = build_generator::<f32>(1, 11).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let base = Array2::from_shape_fn((40, 40), |_| rng.gen_range(0.0f32..1.0));
        // embed at two offsets inside a larger zero field
        let mut a = Array3::zeros((1, 64, 64));
        a.slice_mut(ndarray::s![0, 4..44, 4..44])
            .assign(&base.view().insert_axis(Axis(0)).index_axis(Axis(0), 0));
        let mut b = Array3::zeros((1, 64, 64));
        b.slice_mut(ndarray::s![0, 5..45, 5..45])
            .assign(&base.view().insert_axis(Axis(0)).index_axis(Axis(0), 0));
        let ya = generator_forward(&p, &SliceStack::new(a).unwrap()).unwrap();
        let yb = generator_forward(&p, &SliceStack::new(b).unwrap()).unwrap();
        // compare deep-interior region, away from both borders and content edges
        for i in 20..30 {
            for j in 20..30 {
                assert!(
                    (ya[[i, j]] - yb[[i + 1, j + 1]]).abs() < 1e-6,
                    "equivariance broken at ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn generator_backward_matches_finite_differences() {
        // tiny network in f64, loss = sum(output)
        let mut p = build_generator_with_channels::<f64>(3, 21, 2).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(22);
        let x = Array::from_shape_fn((1, 1, 3, 20, 20), |_| rng.gen_range(0.1f64..1.0));
        let (y, cache) = generator_forward_cached(&p, &x).unwrap();
        let dout = Tensor::<f64>::ones(y.raw_dim());
        let grads = generator_backward(&p, &cache, &dout);

        let loss = |p: &GeneratorParams<f64>| generator_forward_batch(p, &x).unwrap().sum();
        let eps = 1e-6f64;
        // probe one weight per block kind
        enum Pick {
            Conv(usize),
            Deconv(usize),
            Bottleneck(usize),
        }
        let probes = [
            (Pick::Conv(0), (0, 1, 1, 1, 1)),
            (Pick::Deconv(1), (1, 0, 0, 2, 2)),
            (Pick::Bottleneck(2), (3, 1, 0, 0, 0)),
        ];
        for (pick, idx) in probes {
            let gval = match pick {
                Pick::Conv(i) => grads.conv[i].weight[idx],
                Pick::Deconv(i) => grads.deconv[i].weight[idx],
                Pick::Bottleneck(i) => grads.bottleneck[i].weight[idx],
            };
            fn layer_of<'a>(p: &'a mut GeneratorParams<f64>, pick: &Pick) -> &'a mut ConvLayer<f64> {
                match *pick {
                    Pick::Conv(i) => &mut p.conv[i],
                    Pick::Deconv(i) => &mut p.deconv[i],
                    Pick::Bottleneck(i) => &mut p.bottleneck[i],
                }
            }
            let orig = layer_of(&mut p, &pick).weight[idx];
            layer_of(&mut p, &pick).weight[idx] = orig + eps;
            let fp = loss(&p);
            layer_of(&mut p, &pick).weight[idx] = orig - eps;
            let fm = loss(&p);
            layer_of(&mut p, &pick).weight[idx] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let rel = (gval - fd).abs() / fd.abs().max(1e-6);
            assert!(rel < 1e-4, "analytic {gval} vs fd {fd}");
        }
    }

    #[test]
    fn critic_zero_weights_zero_output_and_golden_value() {
        let mut p = build_discriminator_custom::<f32>(&[4, 4, 8, 8, 8, 8], 16, 64, 1);
        for s in p.param_slices_mut() {
            for v in s.iter_mut() {
                *v = 0.0;
            }
        }
        let patch = Array2::zeros((64, 64));
        assert_eq!(discriminator_forward(&p, &patch).unwrap(), 0.0);

        let p = build_discriminator_custom::<f32>(&[4, 4, 8, 8, 8, 8], 16, 64, 123);
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let patch = Array2::from_shape_fn((64, 64), |_| rng.gen_range(0.0f32..1.0));
        let v = discriminator_forward(&p, &patch).unwrap();
        assert!(v.is_finite());
        let v2 = discriminator_forward(&p, &patch).unwrap();
        assert_eq!(v, v2);
    }

    #[test]
    fn critic_rejects_wrong_size() {
        let p = build_discriminator_custom::<f32>(&[4, 4, 8, 8, 8, 8], 16, 64, 1);
        let patch = Array2::zeros((32, 32));
        assert!(discriminator_forward(&p, &patch).is_err());
    }

    #[test]
    fn critic_param_and_input_grads_match_finite_differences() {
        // f64: finite differences on leaky ReLU nets are badly biased in f32
        let mut p = build_discriminator_custom::<f64>(&[2, 2, 4, 4], 8, 24, 31);
        let mut rng = ChaCha20Rng::seed_from_u64(32);
        let mut x: Tensor<f64> =
            Array::from_shape_fn((2, 1, 1, 24, 24), |_| rng.gen_range(-1.0f64..1.0));
        let (_, cache) = critic_forward_cached(&p, &x).unwrap();
        let dvals = Array1::ones(2);
        let (grads, dx) = critic_backward(&p, &cache, &dvals, true, true);
        let grads = grads.unwrap();
        let dx = dx.unwrap();

        let loss = |p: &DiscriminatorParams<f64>, x: &Tensor<f64>| {
            critic_forward_cached(p, x).unwrap().0.sum()
        };
        let eps = 1e-6f64;
        // conv weight
        let orig = p.conv[2].weight[[1, 3, 0, 1, 2]];
        p.conv[2].weight[[1, 3, 0, 1, 2]] = orig + eps;
        let fp = loss(&p, &x);
        p.conv[2].weight[[1, 3, 0, 1, 2]] = orig - eps;
        let fm = loss(&p, &x);
        p.conv[2].weight[[1, 3, 0, 1, 2]] = orig;
        let fd = (fp - fm) / (2.0 * eps);
        let g = grads.conv[2].weight[[1, 3, 0, 1, 2]];
        assert!((g - fd).abs() / fd.abs().max(1e-6) < 1e-4, "{g} vs {fd}");
        // input gradient at several probes
        let mut worst = 0.0f64;
        for idx in [(1, 0, 0, 10, 10), (0, 0, 0, 5, 7), (1, 0, 0, 20, 3)] {
            let orig = x[idx];
            x[idx] = orig + eps;
            let fp = loss(&p, &x);
            x[idx] = orig - eps;
            let fm = loss(&p, &x);
            x[idx] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let g = dx[idx];
            worst = worst.max((g - fd).abs() / fd.abs().max(1e-6));
        }
        assert!(worst < 1e-4, "worst rel err {worst}");
    }
}
