//! Low-rank adapter pairs added to frozen projection weights.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::ModelError;

/// One adapter: `a` is rank x d_in, `b` is d_out x rank. `b` starts at zero
/// so the adapted projection initially equals the frozen one.
#[derive(Debug, Clone)]
pub struct LoraPair {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

impl LoraPair {
    pub fn init(rank: usize, d_in: usize, d_out: usize, rng: &mut ChaCha20Rng) -> LoraPair {
        let a = Array2::from_shape_fn((rank, d_in), |_| normal(rng) * 0.02);
        let b = Array2::zeros((d_out, rank));
        LoraPair { a, b }
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    /// Adapter contribution for a batch of rows: scale * (x @ a^T) @ b^T.
    pub fn delta(&self, x: &Array2<f64>, scale: f64) -> Array2<f64> {
        let xa = x.dot(&self.a.t());
        let mut out = xa.dot(&self.b.t());
        out.mapv_inplace(|v| v * scale);
        out
    }

    /// Intermediate x @ a^T, cached for the backward pass.
    pub fn project(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.a.t())
    }
}

pub(crate) fn normal(rng: &mut ChaCha20Rng) -> f64 {
    // Box-Muller; two uniform draws per sample keeps the stream simple.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Adapted matrix-vector product: W x + (alpha/rank) * B (A x).
pub fn lora_apply(
    w_frozen: &Array2<f64>,
    a: &Array2<f64>,
    b: &Array2<f64>,
    rank: usize,
    alpha: f64,
    x: &Array1<f64>,
) -> Result<Array1<f64>, ModelError> {
    let (d_out, d_in) = w_frozen.dim();
    if a.dim() != (rank, d_in) || b.dim() != (d_out, rank) || x.len() != d_in {
        return Err(ModelError::ShapeMismatch {
            op: "lora_apply",
            details: format!(
                "W {:?}, A {:?}, B {:?}, x {} with rank {rank}",
                w_frozen.dim(),
                a.dim(),
                b.dim(),
                x.len()
            ),
        });
    }
    let scale = alpha / rank as f64;
    let ax = a.dot(x);
    let mut out = w_frozen.dot(x);
    out.scaled_add(scale, &b.dot(&ax));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::SeedableRng;

    #[test]
    fn zero_b_is_a_no_op() {
        let w = arr2(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let a = arr2(&[[0.5, -0.5], [1.0, 2.0]]);
        let b = Array2::zeros((3, 2));
        let x = Array1::from(vec![1.0, -1.0]);
        let out = lora_apply(&w, &a, &b, 2, 16.0, &x).unwrap();
        assert_eq!(out, w.dot(&x));
    }

    #[test]
    fn identity_slices_pass_input_through() {
        // W = 0, alpha = rank, A and B identity slices: output = x on the
        // first `rank` dims.
        let d = 4;
        let rank = 2;
        let w = Array2::zeros((d, d));
        let mut a = Array2::zeros((rank, d));
        let mut b = Array2::zeros((d, rank));
        for r in 0..rank {
            a[[r, r]] = 1.0;
            b[[r, r]] = 1.0;
        }
        let x = Array1::from(vec![1.0, 2.0, 3.0, 4.0]);
        let out = lora_apply(&w, &a, &b, rank, rank as f64, &x).unwrap();
        assert_eq!(out, Array1::from(vec![1.0, 2.0, 0.0, 0.0]));
    }

    #[test]
    fn matches_dense_materialization() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let (d_out, d_in, rank, alpha) = (5, 3, 2, 7.0);
        let w = Array2::from_shape_fn((d_out, d_in), |_| normal(&mut rng));
        let a = Array2::from_shape_fn((rank, d_in), |_| normal(&mut rng));
        let b = Array2::from_shape_fn((d_out, rank), |_| normal(&mut rng));
        let x = Array1::from_shape_fn(d_in, |_| normal(&mut rng));

        let out = lora_apply(&w, &a, &b, rank, alpha, &x).unwrap();
        let dense = &w + &(b.dot(&a) * (alpha / rank as f64));
        let expect = dense.dot(&x);
        for (got, want) in out.iter().zip(expect.iter()) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let w = Array2::zeros((3, 2));
        let a = Array2::zeros((2, 3)); // wrong d_in
        let b = Array2::zeros((3, 2));
        let x = Array1::zeros(2);
        assert!(lora_apply(&w, &a, &b, 2, 4.0, &x).is_err());
    }
}
