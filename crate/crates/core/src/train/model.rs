//! Toy CTR model: the embedding of each field's id, concatenated with the
//! dense features, feeds a single logistic unit.
//!
//! The arithmetic is generic so the same code runs in `f32` for training and
//! in `f64` for finite-difference checks.

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyModel {
    pub fields: usize,
    pub dim: usize,
    pub dense_dim: usize,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn lit<F: Float>(x: f64) -> F {
    F::from(x).expect("representable constant")
}

pub fn sigmoid<F: Float>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

/// `log(1 + e^z) - y z`, stable for large `|z|`.
pub fn logistic_loss<F: Float>(z: F, y: u8) -> F {
    let sp = z.max(F::zero()) + (-z.abs()).exp().ln_1p();
    if y == 1 {
        sp - z
    } else {
        sp
    }
}

impl ToyModel {
    /// Length of the dense parameter vector: one weight per input plus bias.
    pub fn nn_len(&self) -> usize {
        self.fields * self.dim + self.dense_dim + 1
    }

    pub fn init_nn(&self, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00aa_55aa_0000_0002);
        let r = 1.0 / (self.nn_len() as f32).sqrt();
        let mut w: Vec<f32> = (0..self.nn_len()).map(|_| rng.gen_range(-r..r)).collect();
        *w.last_mut().unwrap() = 0.0;
        w
    }

    /// First value of a key's embedding: uniform in `(-1/sqrt(d), 1/sqrt(d))`,
    /// a pure function of `(seed, key)`.
    pub fn init_embedding(&self, seed: u64, key: u64) -> Vec<f32> {
        let r = 1.0 / (self.dim as f64).sqrt();
        let base = splitmix(seed ^ splitmix(key));
        (0..self.dim as u64)
            .map(|j| {
                let u = (splitmix(base.wrapping_add(j)) >> 11) as f64 / (1u64 << 53) as f64;
                ((2.0 * u - 1.0) * r) as f32
            })
            .collect()
    }

    /// `emb` holds the `fields x dim` embeddings of one sample.
    pub fn logit<F: Float>(&self, w: &[F], emb: &[F], dense: &[F]) -> F {
        let k = self.fields * self.dim;
        let mut z = w[self.nn_len() - 1];
        for (wi, e) in w[..k].iter().zip(emb) {
            z = z + *wi * *e;
        }
        for (wi, x) in w[k..k + self.dense_dim].iter().zip(dense) {
            z = z + *wi * *x;
        }
        z
    }

    pub fn loss<F: Float>(&self, w: &[F], emb: &[F], dense: &[F], y: u8) -> F {
        logistic_loss(self.logit(w, emb, dense), y)
    }

    /// Adds `scale` times the gradient of one sample's loss to `grad_w` and
    /// `grad_emb`, and returns the unscaled loss.
    #[allow(clippy::too_many_arguments)]
    pub fn accumulate<F: Float>(
        &self,
        w: &[F],
        emb: &[F],
        dense: &[F],
        y: u8,
        scale: F,
        grad_w: &mut [F],
        grad_emb: &mut [F],
    ) -> F {
        let z = self.logit(w, emb, dense);
        let y_f = if y == 1 { F::one() } else { F::zero() };
        let dz = (sigmoid(z) - y_f) * scale;
        let k = self.fields * self.dim;
        for j in 0..k {
            grad_w[j] = grad_w[j] + dz * emb[j];
            grad_emb[j] = grad_emb[j] + dz * w[j];
        }
        for j in 0..self.dense_dim {
            grad_w[k + j] = grad_w[k + j] + dz * dense[j];
        }
        let b = self.nn_len() - 1;
        grad_w[b] = grad_w[b] + dz;
        logistic_loss(z, y)
    }

    /// Central finite-difference gradient of one sample's loss.
    pub fn numeric_gradient(&self, w: &[f64], emb: &[f64], dense: &[f64], y: u8, h: f64) -> (Vec<f64>, Vec<f64>) {
        let mut w2 = w.to_vec();
        let gw = (0..w.len())
            .map(|j| {
                let orig = w2[j];
                w2[j] = orig + h;
                let up = self.loss(&w2, emb, dense, y);
                w2[j] = orig - h;
                let down = self.loss(&w2, emb, dense, y);
                w2[j] = orig;
                (up - down) / (lit::<f64>(2.0) * h)
            })
            .collect();
        let mut e2 = emb.to_vec();
        let ge = (0..emb.len())
            .map(|j| {
                let orig = e2[j];
                e2[j] = orig + h;
                let up = self.loss(w, &e2, dense, y);
                e2[j] = orig - h;
                let down = self.loss(w, &e2, dense, y);
                e2[j] = orig;
                (up - down) / (2.0 * h)
            })
            .collect();
        (gw, ge)
    }
}

/// Largest relative difference between analytic and numeric gradients, with
/// the denominator floored at `floor`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
