//! Ungated low-rank adapter (plain LoRA) and the factor-orthogonality
//! penalty used by adaptive-rank baselines.
//!
//! The penalty exists so step-time comparisons have a realistic surrogate
//! for regularizer-based rank control: SoRA's gate step replaces it, and the
//! cost difference is what the benchmark measures.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};

/// Frozen base weight plus low-rank factors, no gate: the increment is
/// `W_u (W_d x)`, computed down-then-up exactly like the gated path so the
/// two agree bitwise when the gate is all ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    w0: Matrix,
    wd: Matrix,
    wu: Matrix,
}

/// Gradients for the two trainable factors.
#[derive(Clone, Debug)]
pub struct LoraGrads {
    pub d_wd: Matrix,
    pub d_wu: Matrix,
}

impl LoraAdapter {
    pub fn new(w0: Matrix, wd: Matrix, wu: Matrix) -> Result<Self> {
        let (p, q) = (w0.rows(), w0.cols());
        let r = wd.rows();
        if wd.cols() != q || wu.rows() != p || wu.cols() != r {
            return Err(Error::ShapeMismatch {
                op: "LoraAdapter::new",
                expected: format!("wd {r}x{q}, wu {p}x{r}"),
                got: format!(
                    "wd {}x{}, wu {}x{}",
                    wd.rows(),
                    wd.cols(),
                    wu.rows(),
                    wu.cols()
                ),
            });
        }
        if r > p.min(q) {
            return Err(Error::InvalidConfig(format!(
                "rank {r} exceeds min(p, q) = {}",
                p.min(q)
            )));
        }
        Ok(LoraAdapter { w0, wd, wu })
    }

    /// Same factor initialization as the gated adapter: `wd` Gaussian with
    /// variance `1/r`, `wu` zero. Draws the identical RNG stream, so a gated
    /// and an ungated adapter built from equal seeds start bit-identical.
    pub fn init(w0: Matrix, r: usize, rng: &mut SeededRng) -> Result<Self> {
        let (p, q) = (w0.rows(), w0.cols());
        if r == 0 || r > p.min(q) {
            return Err(Error::InvalidConfig(format!(
                "rank must be in 1..=min(p, q) = {}, got {r}",
                p.min(q)
            )));
        }
        let std = (1.0 / r as f64).sqrt();
        let wd = rng.normal_matrix(r, q, std);
        let wu = Matrix::zeros(p, r);
        LoraAdapter::new(w0, wd, wu)
    }

    pub fn p(&self) -> usize {
        self.w0.rows()
    }

    pub fn q(&self) -> usize {
        self.w0.cols()
    }

    pub fn rank(&self) -> usize {
        self.wd.rows()
    }

    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    pub fn wd(&self) -> &Matrix {
        &self.wd
    }

    pub fn wu(&self) -> &Matrix {
        &self.wu
    }

    pub(crate) fn wd_mut(&mut self) -> &mut Matrix {
        &mut self.wd
    }

    pub(crate) fn wu_mut(&mut self) -> &mut Matrix {
        &mut self.wu
    }

    /// Increment only: `W_u (W_d x)` with cached `h = W_d x`.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let h = self.wd.matmul(x)?;
        let z = self.wu.matmul(&h)?;
        Ok((z, h))
    }

    /// Full layer output `W_0 x + W_u (W_d x)`.
    pub fn lora_forward(&self, x: &Matrix) -> Result<Matrix> {
        let (z, _) = self.forward(x)?;
        self.w0.matmul(x)?.add(&z)
    }

    /// Backward for the increment; mirrors the gated path with `g = 1`.
    pub fn backward(&self, x: &Matrix, h: &Matrix, grad_z: &Matrix) -> Result<(LoraGrads, Matrix)> {
        let d_wu = grad_z.matmul(&h.transpose())?;
        let t = self.wu.transpose().matmul(grad_z)?;
        let d_wd = t.matmul(&x.transpose())?;
        let grad_x = self.wd.transpose().matmul(&t)?;
        Ok((LoraGrads { d_wd, d_wu }, grad_x))
    }
}

/// Orthogonality penalty `R = ‖UᵀU − I‖_F² + ‖VᵀV − I‖_F²` with analytic
/// gradients `4U(UᵀU − I)` and `4V(VᵀV − I)`. The identity has the Gram
/// dimension (`U.cols` resp. `V.cols`).
pub fn orthogonality_penalty(u: &Matrix, v: &Matrix) -> Result<(f64, Matrix, Matrix)> {
    let gram_dev = |m: &Matrix| -> Result<(f64, Matrix)> {
        let gram = m.transpose().matmul(m)?;
        let dev = gram.sub(&Matrix::identity(m.cols()))?;
        // Squared Frobenius norm summed directly; sqrt-then-square would
        // cost a rounding step for nothing.
        let val = dev.data().iter().map(|x| x * x).sum::<f64>();
        let grad = m.matmul(&dev)?.scale(4.0);
        Ok((val, grad))
    };
    let (ru, gu) = gram_dev(u)?;
    let (rv, gv) = gram_dev(v)?;
    Ok((ru + rv, gu, gv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, Vector};

    #[test]
    fn lora_forward_is_base_plus_increment() {
        let w0 = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let wd = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let wu = Matrix::from_rows(&[vec![2.0], vec![-1.0]]).unwrap();
        let a = LoraAdapter::new(w0, wd, wu).unwrap();
        let x = Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        // h = 3, z = [6, -3], out = [1, 2] + [6, -3] = [7, -1].
        let out = a.lora_forward(&x).unwrap();
        assert_eq!(out.get(0, 0), 7.0);
        assert_eq!(out.get(1, 0), -1.0);
    }

    #[test]
    fn penalty_on_scaled_identity_matches_hand_value() {
        // U = 2I₂ gives UᵀU − I = 3I₂, ‖3I₂‖_F² = 18; V = I₂ contributes 0.
        let u = Matrix::identity(2).scale(2.0);
        let v = Matrix::identity(2);
        let (r, _, gv) = orthogonality_penalty(&u, &v).unwrap();
        assert_eq!(r, 18.0);
        assert_eq!(gv.max_abs(), 0.0);
    }

    #[test]
    fn penalty_is_zero_iff_columns_orthonormal() {
        // Orthonormal columns in 3x2.
        let u = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let (r, gu, _) = orthogonality_penalty(&u, &Matrix::identity(2)).unwrap();
        assert_eq!(r, 0.0);
        assert_eq!(gu.max_abs(), 0.0);
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(11);
        let u0 = rng.normal_matrix(4, 3, 1.0);
        let v0 = rng.normal_matrix(5, 3, 1.0);
        let (_, gu, gv) = orthogonality_penalty(&u0, &v0).unwrap();

        // Flatten U's entries; V held fixed (and vice versa).
        let pack = |m: &Matrix| Vector::new(m.data().to_vec()).unwrap();
        let unpack = |v: &Vector, rows: usize, cols: usize| {
            Matrix::from_vec(rows, cols, v.data().to_vec()).unwrap()
        };

        let fd_u = finite_diff_grad(
            |vu| {
                let u = unpack(vu, 4, 3);
                orthogonality_penalty(&u, &v0).unwrap().0
            },
            &pack(&u0),
            1e-5,
        )
        .unwrap();
        let fd_v = finite_diff_grad(
            |vv| {
                let v = unpack(vv, 5, 3);
                orthogonality_penalty(&u0, &v).unwrap().0
            },
            &pack(&v0),
            1e-5,
        )
        .unwrap();

        let check = |analytic: &Matrix, fd: &Vector| {
            for (i, (&a, &b)) in analytic.data().iter().zip(fd.data()).enumerate() {
                let scale = 1.0 + a.abs().max(b.abs());
                assert!(
                    (a - b).abs() <= 1e-5 * scale,
                    "entry {i}: analytic {a}, finite-diff {b}"
                );
            }
        };
        check(&gu, &fd_u);
        check(&gv, &fd_v);
    }

    #[test]
    fn init_draws_same_stream_as_gated_adapter() {
        let w0 = Matrix::zeros(4, 3);
        let mut rng_a = SeededRng::new(9);
        let mut rng_b = SeededRng::new(9);
        let lora = LoraAdapter::init(w0.clone(), 2, &mut rng_a).unwrap();
        let sora = crate::adapter::SoraAdapter::init(w0, 2, &mut rng_b).unwrap();
        assert!(lora.wd().bits_eq(sora.wd()));
        assert!(lora.wu().bits_eq(sora.wu()));
    }
}
