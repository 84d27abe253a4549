//! Dense linear algebra, small neural blocks and gradient checking.

mod blocks;
mod gradcheck;
mod matrix;
mod tape;

pub use blocks::{
    attention_forward, ffn_forward, AttentionParams, BoundAttention, BoundFfn, BoundLayerNorm,
    FfnParams, LayerNormParams, LAYER_NORM_EPS,
};
pub use gradcheck::{check_gradients, check_gradients_with, GradCheckReport, REL_ERR_FLOOR};
pub use matrix::{dot, norm, Matrix};
pub use tape::{Gradients, Tape, Var, NORM_EPS};

pub(crate) use tape::{sigmoid, softmax_in_place};

use rand::Rng;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("empty input: {0}")]
    Empty(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Cosine similarity with a flag for zero-norm inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    /// Set when either input had (near-)zero norm; `value` is then 0.
    pub degenerate: bool,
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<Cosine> {
    if u.len() != v.len() {
        return Err(NumericsError::Shape(format!(
            "cosine of vectors with {} and {} entries",
            u.len(),
            v.len()
        )));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu < NORM_EPS || nv < NORM_EPS {
        return Ok(Cosine {
            value: 0.0,
            degenerate: true,
        });
    }
    let value = (dot(u, v) / (nu * nv)).clamp(-1.0, 1.0);
    Ok(Cosine {
        value,
        degenerate: false,
    })
}

/// Numerically stable softmax of one row.
pub fn softmax(row: &[f64]) -> Result<Vec<f64>> {
    if row.is_empty() {
        return Err(NumericsError::Empty("softmax over no candidates".into()));
    }
    if row.iter().any(|v| !v.is_finite()) {
        return Err(NumericsError::NonFinite("softmax input".into()));
    }
    let mut out = row.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Uniform Glorot initialization for a `fan_in × fan_out` weight.
pub fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Matrix {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-a..a))
        .collect();
    Matrix::from_vec(fan_in, fan_out, data).expect("buffer sized to shape")
}

/// A bundle of trainable matrices with a fixed declaration order.
///
/// The visiting order defines the flat layout used by checkpoints, the
/// optimizer and gradient checking.
pub trait Parameterized {
    fn visit(&self, f: &mut dyn FnMut(&Matrix));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |m| n += m.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |m| out.extend_from_slice(m.as_slice()));
        out
    }

    fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.num_params();
        if flat.len() != expected {
            return Err(NumericsError::Shape(format!(
                "flat parameter buffer has {} entries, expected {expected}",
                flat.len()
            )));
        }
        let mut offset = 0;
        self.visit_mut(&mut |m| {
            let n = m.len();
            m.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_examples() {
        let c = cosine_similarity(&[1., 2., 3.], &[1., 2., 3.]).unwrap();
        assert!((c.value - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1., 0.], &[0., 1.]).unwrap().value, 0.0);
        let c = cosine_similarity(&[1., 0.], &[1., 1.]).unwrap();
        assert!((c.value - 0.70710678).abs() < 1e-8);
        assert!(!c.degenerate);
    }

    #[test]
    fn cosine_zero_norm_is_flagged() {
        let c = cosine_similarity(&[0., 0.], &[1., 1.]).unwrap();
        assert_eq!(c.value, 0.0);
        assert!(c.degenerate);
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[3.7]).unwrap(), vec![1.0]);
        assert_eq!(softmax(&[2.0, 2.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[0.0, 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        assert!(softmax(&[]).is_err());
        assert!(softmax(&[f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            row in proptest::collection::vec(-50.0f64..50.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let p = softmax(&row).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| x > 0.0));
            let shifted: Vec<f64> = row.iter().map(|x| x + shift).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn cosine_is_bounded_and_reflexive(
            u in proptest::collection::vec(-10.0f64..10.0, 1..16),
            v_seed in proptest::collection::vec(-10.0f64..10.0, 16),
        ) {
            let v = &v_seed[..u.len()];
            let c = cosine_similarity(&u, v).unwrap();
            prop_assert!(c.value.abs() <= 1.0 + 1e-12);
            let sym = cosine_similarity(v, &u).unwrap();
            prop_assert_eq!(c.value, sym.value);
            if norm(&u) > 1e-6 {
                prop_assert!((cosine_similarity(&u, &u).unwrap().value - 1.0).abs() < 1e-12);
            }
        }
    }
}
