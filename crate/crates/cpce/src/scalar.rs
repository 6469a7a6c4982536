use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

/// Element type for network tensors. Training runs in `f32`; gradient
/// verification instantiates the same code with `f64` so finite
/// differences are not swamped by rounding noise.
pub trait Scalar: ndarray::NdFloat + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn std_normal(rng: &mut ChaCha20Rng) -> Self;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn std_normal(rng: &mut ChaCha20Rng) -> Self {
        StandardNormal.sample(rng)
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn std_normal(rng: &mut ChaCha20Rng) -> Self {
        StandardNormal.sample(rng)
    }
}
