//! Weight initialization: truncated normal draws from a seeded RNG.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::float::{real, Real};

/// Draws values from N(0, std^2) truncated to two standard deviations,
/// threading a single RNG so construction order fixes every weight.
pub struct Initializer<'a> {
    rng: &'a mut ChaCha12Rng,
}

impl<'a> Initializer<'a> {
    pub fn new(rng: &'a mut ChaCha12Rng) -> Self {
        Initializer { rng }
    }

    /// One standard normal draw via Box-Muller. The second value of each
    /// pair is discarded to keep the sampler stateless.
    fn standard_normal(&mut self) -> f64 {
        loop {
            let u1: f64 = self.rng.gen::<f64>();
            if u1 > f64::MIN_POSITIVE {
                let u2: f64 = self.rng.gen::<f64>();
                return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            }
        }
    }

    /// Rejection-sampled truncated normal: resample until |z| <= 2.
    pub fn trunc_normal<F: Real>(&mut self, std: f64) -> F {
        loop {
            let z = self.standard_normal();
            if z.abs() <= 2.0 {
                return real(z * std);
            }
        }
    }

    pub fn matrix<F: Real>(&mut self, rows: usize, cols: usize, std: f64) -> Array2<F> {
        Array2::from_shape_simple_fn((rows, cols), || self.trunc_normal(std))
    }

    pub fn vector<F: Real>(&mut self, len: usize, std: f64) -> Array1<F> {
        Array1::from_shape_simple_fn(len, || self.trunc_normal(std))
    }
}
