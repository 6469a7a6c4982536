//! Training objectives: WGAN-GP critic loss, adversarial generator loss,
//! perceptual loss over a frozen feature extractor, the combined
//! objective, and the Gram-matrix texture loss.

use ndarray::{Array1, Array2, Array5, ArrayD, Ix4};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{CpceError, Result};
use crate::model::{critic_forward_cached, critic_input_grad, ConvLayer, DiscriminatorParams};
use crate::ops::{self, Tensor};
use crate::scalar::Scalar;

pub const LAMBDA_GP: f64 = 10.0;
pub const LAMBDA_P: f64 = 0.1;

/// Sum-vs-mean convention for the perceptual and texture losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    fn scale<T: Scalar>(self, n: usize) -> T {
        match self {
            Reduction::Mean => T::from_f64(1.0 / n as f64),
            Reduction::Sum => T::one(),
        }
    }
}

// ---------------------------------------------------------------------------
// Feature extractor
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatKind {
    PretrainedVgg19Conv16,
    SeededRandomConvnet,
}

pub enum FeatLayer<T = f32> {
    /// 3x3 conv, zero-padded to preserve size, followed by ReLU.
    Conv(ConvLayer<T>),
    /// 2x2 max pool, stride 2 (odd remainders dropped).
    Pool,
}

/// Frozen feature network φ. Inputs in [0,1] are scaled to [0,255],
/// replicated to 3 channels, and shifted by per-channel means before the
/// convolutional stack.
pub struct FeatureExtractor<T = f32> {
    pub kind: FeatKind,
    pub layers: Vec<FeatLayer<T>>,
    pub channel_mean: [T; 3],
}

const IMAGENET_MEAN: [f64; 3] = [123.68, 116.779, 103.939];

fn he_like<T: Scalar>(rng: &mut ChaCha20Rng, ci: usize, co: usize) -> ConvLayer<T> {
    let std = T::from_f64((2.0 / (ci * 9) as f64).sqrt());
    ConvLayer {
        weight: Tensor::<T>::from_shape_fn((ci, co, 1, 3, 3), |_| T::std_normal(rng) * std),
        bias: Array1::zeros(co),
    }
}

/// VGG-19 convolution plan up to and including its 16th convolution:
/// per-block conv counts 2,2,4,4,4 with a pool between blocks.
const VGG_BLOCKS: [(usize, usize); 5] = [(2, 64), (2, 128), (4, 256), (4, 512), (4, 512)];

impl<T: Scalar> FeatureExtractor<T> {
    /// Small seeded convnet standing in for the pretrained network when no
    /// weight file is available: conv(3→8), pool, conv(8→16).
    pub fn seeded_random_convnet(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let layers = vec![
            FeatLayer::Conv(he_like(&mut rng, 3, 8)),
            FeatLayer::Pool,
            FeatLayer::Conv(he_like(&mut rng, 8, 16)),
        ];
        FeatureExtractor {
            kind: FeatKind::SeededRandomConvnet,
            layers,
            channel_mean: IMAGENET_MEAN.map(T::from_f64),
        }
    }

    /// Builds the VGG-19-through-conv16 extractor from named weight arrays
    /// `conv{b}_{i}.weight` (`[c_out, c_in, 3, 3]`) and `conv{b}_{i}.bias`.
    pub fn vgg19_conv16(named: &[(String, ArrayD<f32>)]) -> Result<Self> {
        let lookup = |name: &str| -> Result<&ArrayD<f32>> {
            named
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, a)| a)
                .ok_or_else(|| CpceError::config(format!("missing weight array `{name}`")))
        };
        let mut layers = Vec::new();
        let mut ci = 3usize;
        for (b, &(n_convs, co)) in VGG_BLOCKS.iter().enumerate() {
            if b > 0 {
                layers.push(FeatLayer::Pool);
            }
            for i in 1..=n_convs {
                let wname = format!("conv{}_{i}.weight", b + 1);
                let w4 = lookup(&wname)?
                    .clone()
                    .into_dimensionality::<Ix4>()
                    .map_err(|e| CpceError::config(format!("`{wname}`: {e}")))?;
                let s = w4.shape();
                if s != [co, ci, 3, 3] {
                    return Err(CpceError::config(format!(
                        "`{wname}` has shape {s:?}, expected [{co}, {ci}, 3, 3]"
                    )));
                }
                // [c_out, c_in, kh, kw] -> [c_in, c_out, 1, kh, kw]
                let mut w = Tensor::<T>::zeros((ci, co, 1, 3, 3));
                for (idx, &v) in w4.indexed_iter() {
                    w[[idx.1, idx.0, 0, idx.2, idx.3]] = T::from_f64(v as f64);
                }
                let bias = lookup(&format!("conv{}_{i}.bias", b + 1))?
                    .iter()
                    .map(|&v| T::from_f64(v as f64))
                    .collect::<Array1<T>>();
                if bias.len() != co {
                    return Err(CpceError::config(format!(
                        "conv{}_{i}.bias has {} entries, expected {co}",
                        b + 1,
                        bias.len()
                    )));
                }
                layers.push(FeatLayer::Conv(ConvLayer { weight: w, bias }));
                ci = co;
            }
        }
        Ok(FeatureExtractor {
            kind: FeatKind::PretrainedVgg19Conv16,
            layers,
            channel_mean: IMAGENET_MEAN.map(T::from_f64),
        })
    }

    /// [0,1] grayscale `[b,1,1,h,w]` → `[b,3,1,h,w]` in feature-network units.
    fn preprocess(&self, x: &Tensor<T>) -> Tensor<T> {
        let s = x.shape();
        let scale = T::from_f64(255.0);
        let mut y = Tensor::<T>::zeros((s[0], 3, s[2], s[3], s[4]));
        for c in 0..3 {
            let mut ch = y.slice_mut(ndarray::s![.., c..c + 1, .., .., ..]);
            ch.assign(x);
            ch.mapv_inplace(|v| v * scale - self.channel_mean[c]);
        }
        y
    }

    /// Forward pass; the cache holds everything needed for the input
    /// gradient (extractor weights are frozen, so no parameter gradients).
    pub fn features(&self, x: &Tensor<T>) -> Result<(Tensor<T>, FeatCache<T>)> {
        if x.shape()[1] != 1 {
            return Err(CpceError::shape("feature input must have 1 channel"));
        }
        let pre = self.preprocess(x);
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut pool_idx = Vec::with_capacity(self.layers.len());
        let mut cur = pre;
        for layer in &self.layers {
            inputs.push(cur.clone());
            match layer {
                FeatLayer::Conv(l) => {
                    let xp = ops::pad_spatial(&cur, 1);
                    let mut a = ops::conv_fwd(&xp, &l.weight, Some(&l.bias), (1, 1))?;
                    ops::relu_inplace(&mut a);
                    pool_idx.push(None);
                    outputs.push(a.clone());
                    cur = a;
                }
                FeatLayer::Pool => {
                    let (y, idx) = maxpool_fwd(&cur);
                    pool_idx.push(Some(idx));
                    outputs.push(y.clone());
                    cur = y;
                }
            }
        }
        Ok((
            cur,
            FeatCache {
                inputs,
                outputs,
                pool_idx,
            },
        ))
    }

    /// Gradient of a scalar loss w.r.t. the original `[b,1,1,h,w]` input,
    /// given its gradient w.r.t. the feature output.
    pub fn input_grad(&self, cache: &FeatCache<T>, dfeat: &Tensor<T>) -> Tensor<T> {
        let mut g = dfeat.clone();
        for i in (0..self.layers.len()).rev() {
            match &self.layers[i] {
                FeatLayer::Conv(l) => {
                    ops::relu_bwd_inplace(&mut g, &cache.outputs[i]);
                    let din = ops::dims_of(&cache.inputs[i]);
                    let padded = ops::ConvDims {
                        height: din.height + 2,
                        width: din.width + 2,
                        ..din
                    };
                    let gp = ops::conv_input_grad(&g, &l.weight, padded, (1, 1));
                    let (h, w) = (din.height, din.width);
                    g = gp
                        .slice(ndarray::s![.., .., .., 1..1 + h, 1..1 + w])
                        .as_standard_layout()
                        .to_owned();
                }
                FeatLayer::Pool => {
                    g = maxpool_bwd(&g, cache.pool_idx[i].as_ref().unwrap(), &cache.inputs[i]);
                }
            }
        }
        // undo preprocessing: sum the replicated channels, scale by 255
        let s = g.shape();
        let mut out = Tensor::<T>::zeros((s[0], 1, s[2], s[3], s[4]));
        let scale = T::from_f64(255.0);
        for c in 0..3 {
            out.scaled_add(scale, &g.slice(ndarray::s![.., c..c + 1, .., .., ..]));
        }
        out
    }
}

pub struct FeatCache<T = f32> {
    inputs: Vec<Tensor<T>>,
    outputs: Vec<Tensor<T>>,
    pool_idx: Vec<Option<Array5<usize>>>,
}

/// 2x2/stride-2 max pool over height and width; `idx` records the winning
/// flat offset within each input plane for the backward pass.
fn maxpool_fwd<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Array5<usize>) {
    let s = x.shape();
    let (b, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::<T>::zeros((b, c, d, oh, ow));
    let mut idx = Array5::<usize>::zeros((b, c, d, oh, ow));
    for bi in 0..b {
        for ci in 0..c {
            for z in 0..d {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best = x[[bi, ci, z, 2 * i, 2 * j]];
                        let mut at = 2 * i * w + 2 * j;
                        for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                            let v = x[[bi, ci, z, 2 * i + di, 2 * j + dj]];
                            if v > best {
                                best = v;
                                at = (2 * i + di) * w + (2 * j + dj);
                            }
                        }
                        y[[bi, ci, z, i, j]] = best;
                        idx[[bi, ci, z, i, j]] = at;
                    }
                }
            }
        }
    }
    (y, idx)
}

fn maxpool_bwd<T: Scalar>(dy: &Tensor<T>, idx: &Array5<usize>, like: &Tensor<T>) -> Tensor<T> {
    let s = like.shape();
    let w = s[4];
    let mut dx = Tensor::<T>::zeros(like.raw_dim());
    for (pos, &g) in dy.indexed_iter() {
        let at = idx[pos];
        let (bi, ci, z) = (pos.0, pos.1, pos.2);
        let cur = dx[[bi, ci, z, at / w, at % w]];
        dx[[bi, ci, z, at / w, at % w]] = cur + g;
    }
    dx
}

// ---------------------------------------------------------------------------
// Scalar losses
// ---------------------------------------------------------------------------

/// All loss terms for one step, with the λ weights that produced them.
#[derive(Debug, Clone, Copy)]
pub struct LossBundle {
    pub adversarial: f64,
    pub perceptual: f64,
    pub combined: f64,
    pub wasserstein_estimate: f64,
    pub gradient_penalty: f64,
    pub lambda_gp: f64,
    pub lambda_p: f64,
}

fn mean<T: Scalar>(v: &Array1<T>) -> Result<T> {
    if v.is_empty() {
        return Err(CpceError::config("empty batch"));
    }
    Ok(v.sum() / T::from_f64(v.len() as f64))
}

/// Eq.-style adversarial generator loss: the batch mean of D(G(x)),
/// minimized by the generator.
pub fn adversarial_loss<T: Scalar>(critic_values_on_fake: &Array1<T>) -> Result<T> {
    mean(critic_values_on_fake)
}

/// Critic objective: mean D(fake) − mean D(real) + gradient penalty.
pub fn critic_loss<T: Scalar>(
    critic_on_fake: &Array1<T>,
    critic_on_real: &Array1<T>,
    gp: T,
) -> Result<T> {
    if critic_on_fake.len() != critic_on_real.len() {
        return Err(CpceError::config("fake/real batch sizes differ"));
    }
    Ok(mean(critic_on_fake)? - mean(critic_on_real)? + gp)
}

/// |mean D(real) − mean D(fake)|, the reported Wasserstein estimate.
pub fn wasserstein_estimate<T: Scalar>(
    critic_on_fake: &Array1<T>,
    critic_on_real: &Array1<T>,
) -> Result<T> {
    Ok((mean(critic_on_real)? - mean(critic_on_fake)?).abs())
}

pub fn combined_generator_loss<T: Scalar>(adv: T, perc: T, lambda_p: T) -> T {
    adv + lambda_p * perc
}

/// Perceptual loss: ‖φ(fake) − φ(real)‖² with the chosen reduction
/// (mean divides by the total feature element count).
pub fn perceptual_loss<T: Scalar>(
    extractor: &FeatureExtractor<T>,
    fake: &Tensor<T>,
    real: &Tensor<T>,
    reduction: Reduction,
) -> Result<T> {
    Ok(perceptual_loss_and_grad(extractor, fake, real, reduction, false)?.0)
}

/// Perceptual loss and, optionally, its gradient w.r.t. `fake`.
pub fn perceptual_loss_and_grad<T: Scalar>(
    extractor: &FeatureExtractor<T>,
    fake: &Tensor<T>,
    real: &Tensor<T>,
    reduction: Reduction,
    want_grad: bool,
) -> Result<(T, Option<Tensor<T>>)> {
    if fake.shape() != real.shape() {
        return Err(CpceError::shape(format!(
            "perceptual loss shape mismatch: {:?} vs {:?}",
            fake.shape(),
            real.shape()
        )));
    }
    let (ff, cache) = extractor.features(fake)?;
    let (fr, _) = extractor.features(real)?;
    let scale = reduction.scale::<T>(ff.len());
    let diff = &ff - &fr;
    let loss = diff.iter().map(|&v| v * v).fold(T::zero(), |a, b| a + b) * scale;
    let grad = if want_grad {
        let two = T::from_f64(2.0);
        let dfeat = diff.mapv(|v| two * v * scale);
        Some(extractor.input_grad(&cache, &dfeat))
    } else {
        None
    };
    Ok((loss, grad))
}

// ---------------------------------------------------------------------------
// Gradient penalty
// ---------------------------------------------------------------------------

/// Anything that can score a batch and expose ∇ₓD, for the penalty.
pub trait Critic<T: Scalar> {
    /// Returns per-sample values and the gradient of each value w.r.t. its
    /// own input sample.
    fn value_and_input_grad(&self, x: &Tensor<T>) -> Result<(Array1<T>, Tensor<T>)>;
}

impl<T: Scalar> Critic<T> for DiscriminatorParams<T> {
    fn value_and_input_grad(&self, x: &Tensor<T>) -> Result<(Array1<T>, Tensor<T>)> {
        let (vals, cache) = critic_forward_cached(self, x)?;
        let ones = Array1::ones(vals.len());
        let g = critic_input_grad(self, &cache, &ones);
        Ok((vals, g))
    }
}

/// D(x) = ⟨a, x⟩ + c per sample: the analytic fixture for penalty tests.
pub struct LinearCritic<T = f32> {
    pub weights: Tensor<T>,
    pub offset: T,
}

impl<T: Scalar> Critic<T> for LinearCritic<T> {
    fn value_and_input_grad(&self, x: &Tensor<T>) -> Result<(Array1<T>, Tensor<T>)> {
        let b = x.shape()[0];
        if self.weights.shape()[0] != 1 || x.shape()[1..] != self.weights.shape()[1..] {
            return Err(CpceError::shape("linear critic weight/input mismatch"));
        }
        let ws = self.weights.as_slice().unwrap();
        let n = ws.len();
        let xs = x.as_slice().unwrap();
        let mut vals = Array1::<T>::zeros(b);
        for bi in 0..b {
            let mut acc = self.offset;
            for (w, v) in ws.iter().zip(&xs[bi * n..(bi + 1) * n]) {
                acc = acc + *w * *v;
            }
            vals[bi] = acc;
        }
        let mut g = Tensor::<T>::zeros(x.raw_dim());
        {
            let gs = g.as_slice_mut().unwrap();
            for bi in 0..b {
                gs[bi * n..(bi + 1) * n].copy_from_slice(ws);
            }
        }
        Ok((vals, g))
    }
}

/// Builds the random interpolates Ī = ε·fake + (1−ε)·real, one ε per sample.
pub fn interpolate<T: Scalar>(fake: &Tensor<T>, real: &Tensor<T>, eps: &Array1<T>) -> Tensor<T> {
    let mut out = fake.clone();
    for (bi, mut sample) in out.outer_iter_mut().enumerate() {
        let e = eps[bi];
        let r = real.index_axis(ndarray::Axis(0), bi);
        sample.zip_mut_with(&r, |f, &rv| *f = e * *f + (T::one() - e) * rv);
    }
    out
}

/// WGAN gradient penalty λ·mean_b (‖∇_Ī D(Ī)‖₂ − 1)².
pub fn gradient_penalty<T: Scalar>(
    critic: &impl Critic<T>,
    fake: &Tensor<T>,
    real: &Tensor<T>,
    eps: &Array1<T>,
    lambda_gp: T,
) -> Result<T> {
    if fake.shape() != real.shape() {
        return Err(CpceError::shape("fake/real shape mismatch"));
    }
    let b = fake.shape()[0];
    if eps.len() != b || b == 0 {
        return Err(CpceError::config("need one epsilon per batch sample"));
    }
    let interp = interpolate(fake, real, eps);
    let (_, g) = critic.value_and_input_grad(&interp)?;
    let n = g.len() / b;
    let gs = g.as_slice().unwrap();
    let mut acc = T::zero();
    for bi in 0..b {
        let norm = gs[bi * n..(bi + 1) * n]
            .iter()
            .map(|&v| v * v)
            .fold(T::zero(), |a, x| a + x)
            .sqrt();
        let d = norm - T::one();
        acc = acc + d * d;
    }
    Ok(lambda_gp * acc / T::from_f64(b as f64))
}

// ---------------------------------------------------------------------------
// Gram matrix / texture loss
// ---------------------------------------------------------------------------

/// G = F·Fᵀ for features `[n, m]` (n channels, m spatial positions).
pub fn gram_matrix<T: Scalar>(f: &Array2<T>) -> Array2<T> {
    f.dot(&f.t())
}

/// Texture matching loss: mean over 64×64 tiles of the squared Frobenius
/// distance between Gram matrices of φ-features (edge remainders cropped).
pub fn texture_matching_loss<T: Scalar>(
    extractor: &FeatureExtractor<T>,
    est: &Array2<T>,
    reference: &Array2<T>,
    reduction: Reduction,
) -> Result<T> {
    use crate::model::CRITIC_PATCH as P;
    if est.shape() != reference.shape() {
        return Err(CpceError::shape("texture loss shape mismatch"));
    }
    let (h, w) = (est.shape()[0], est.shape()[1]);
    if h < P || w < P {
        return Err(CpceError::shape(format!(
            "texture loss needs at least {P}x{P}, got {h}x{w}"
        )));
    }
    let mut total = T::zero();
    let mut count = 0usize;
    for i in 0..h / P {
        for j in 0..w / P {
            let tile = |img: &Array2<T>| -> Tensor<T> {
                let v = img
                    .slice(ndarray::s![i * P..(i + 1) * P, j * P..(j + 1) * P])
                    .as_standard_layout()
                    .to_owned();
                v.into_shape_with_order((1, 1, 1, P, P)).unwrap()
            };
            let (fe, _) = extractor.features(&tile(est))?;
            let (fr, _) = extractor.features(&tile(reference))?;
            let flat = |f: &Tensor<T>| -> Array2<T> {
                let s = f.shape();
                f.clone()
                    .into_shape_with_order((s[1], s[2] * s[3] * s[4]))
                    .unwrap()
            };
            let ge = gram_matrix(&flat(&fe));
            let gr = gram_matrix(&flat(&fr));
            let scale = reduction.scale::<T>(ge.len());
            let d = ge
                .iter()
                .zip(gr.iter())
                .map(|(&a, &b)| (a - b) * (a - b))
                .fold(T::zero(), |a, x| a + x);
            total = total + d * scale;
            count += 1;
        }
    }
    Ok(total / T::from_f64(count as f64))
}
