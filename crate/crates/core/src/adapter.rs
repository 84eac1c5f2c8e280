//! Gated low-rank adapter (SoRA).
//!
//! The adapter adds an increment `z = W_u (g ⊙ (W_d x))` on top of a frozen
//! base weight `W_0`. The gate vector `g` sits between the down- and
//! up-projections; driving entries of `g` to exact zero removes ranks. Gates
//! are trained with a proximal step — SGD on the data loss followed by
//! soft-thresholding — never by the matrix optimizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng, Vector};

/// Frozen base weight plus trainable low-rank factors and gate.
///
/// Shapes: `w0` is `p x q`, `wd` is `r_max x q`, `wu` is `p x r_max`,
/// `gate` has length `r_max`, and `r_max <= min(p, q)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoraAdapter {
    w0: Matrix,
    wd: Matrix,
    wu: Matrix,
    gate: Vector,
}

/// Intermediates saved by [`SoraAdapter::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// `W_d x`, shape `r_max x n`.
    pub h: Matrix,
    /// `g ⊙ h` (rows scaled by the gate), shape `r_max x n`.
    pub h_gated: Matrix,
}

/// Gradients of the data loss with respect to the adapter's trainable parts.
#[derive(Clone, Debug)]
pub struct AdapterGrads {
    pub d_wd: Matrix,
    pub d_wu: Matrix,
    pub d_gate: Vector,
}

impl SoraAdapter {
    pub fn new(w0: Matrix, wd: Matrix, wu: Matrix, gate: Vector) -> Result<Self> {
        let (p, q) = (w0.rows(), w0.cols());
        let r_max = wd.rows();
        if wd.cols() != q {
            return Err(Error::ShapeMismatch {
                op: "SoraAdapter::new",
                expected: format!("wd with {q} columns"),
                got: format!("{}x{}", wd.rows(), wd.cols()),
            });
        }
        if wu.rows() != p || wu.cols() != r_max {
            return Err(Error::ShapeMismatch {
                op: "SoraAdapter::new",
                expected: format!("wu of shape {p}x{r_max}"),
                got: format!("{}x{}", wu.rows(), wu.cols()),
            });
        }
        if gate.len() != r_max {
            return Err(Error::ShapeMismatch {
                op: "SoraAdapter::new",
                expected: format!("gate of length {r_max}"),
                got: format!("length {}", gate.len()),
            });
        }
        if r_max > p.min(q) {
            return Err(Error::InvalidConfig(format!(
                "r_max = {r_max} exceeds min(p, q) = {}",
                p.min(q)
            )));
        }
        Ok(SoraAdapter { w0, wd, wu, gate })
    }

    /// Fresh adapter around a frozen `w0`: `wd` drawn Gaussian with variance
    /// `1/r_max`, `wu` zero, gate all ones. The increment starts at exactly
    /// zero while every rank starts active.
    pub fn init(w0: Matrix, r_max: usize, rng: &mut SeededRng) -> Result<Self> {
        let (p, q) = (w0.rows(), w0.cols());
        if r_max == 0 || r_max > p.min(q) {
            return Err(Error::InvalidConfig(format!(
                "r_max must be in 1..=min(p, q) = {}, got {r_max}",
                p.min(q)
            )));
        }
        let std = (1.0 / r_max as f64).sqrt();
        let wd = rng.normal_matrix(r_max, q, std);
        let wu = Matrix::zeros(p, r_max);
        let gate = Vector::ones(r_max);
        SoraAdapter::new(w0, wd, wu, gate)
    }

    pub fn p(&self) -> usize {
        self.w0.rows()
    }

    pub fn q(&self) -> usize {
        self.w0.cols()
    }

    pub fn r_max(&self) -> usize {
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

    pub fn gate(&self) -> &Vector {
        &self.gate
    }

    pub fn set_gate(&mut self, gate: Vector) -> Result<()> {
        if gate.len() != self.r_max() {
            return Err(Error::ShapeMismatch {
                op: "set_gate",
                expected: format!("length {}", self.r_max()),
                got: format!("length {}", gate.len()),
            });
        }
        self.gate = gate;
        Ok(())
    }

    /// Used by the optimizer; gate updates go through [`prox_gate_update`].
    pub(crate) fn wd_mut(&mut self) -> &mut Matrix {
        &mut self.wd
    }

    pub(crate) fn wu_mut(&mut self) -> &mut Matrix {
        &mut self.wu
    }

    /// The dense increment `Δ = W_u diag(g) W_d`, a `p x q` matrix. Analysis
    /// only — training never materializes it.
    pub fn increment_matrix(&self) -> Result<Matrix> {
        self.wu.matmul(&self.wd.scale_rows(&self.gate))
    }

    /// Adapter increment `z = W_u (g ⊙ (W_d x))` for a batch `x` of shape
    /// `q x n` (one sample per column), along with the cached intermediates.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        let h = self.wd.matmul(x)?;
        let h_gated = h.scale_rows(&self.gate);
        let z = self.wu.matmul(&h_gated)?;
        Ok((z, ForwardCache { h, h_gated }))
    }

    /// Full layer output `W_0 x + z`.
    pub fn layer_forward(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        let (z, cache) = self.forward(x)?;
        let out = self.w0.matmul(x)?.add(&z)?;
        Ok((out, cache))
    }

    /// Backward pass for the increment. `grad_z` is the loss gradient at `z`
    /// (`p x n`); returns parameter gradients summed over the batch plus the
    /// gradient with respect to the input `x`. The caller owns any batch-mean
    /// scaling — it belongs in `grad_z`.
    pub fn backward(
        &self,
        x: &Matrix,
        cache: &ForwardCache,
        grad_z: &Matrix,
    ) -> Result<(AdapterGrads, Matrix)> {
        let (p, r, n) = (self.p(), self.r_max(), x.cols());
        if grad_z.rows() != p || grad_z.cols() != n {
            return Err(Error::ShapeMismatch {
                op: "SoraAdapter::backward",
                expected: format!("grad_z of shape {p}x{n}"),
                got: format!("{}x{}", grad_z.rows(), grad_z.cols()),
            });
        }
        if cache.h.rows() != r || cache.h.cols() != n {
            return Err(Error::ShapeMismatch {
                op: "SoraAdapter::backward",
                expected: format!("cached h of shape {r}x{n}"),
                got: format!("{}x{}", cache.h.rows(), cache.h.cols()),
            });
        }

        // dL/dWu = grad_z · h_gated^T
        let d_wu = grad_z.matmul(&cache.h_gated.transpose())?;
        // t = Wu^T · grad_z  (r x n)
        let t = self.wu.transpose().matmul(grad_z)?;
        // dL/dg_i = sum_n t[i, n] * h[i, n]
        let mut d_gate = Vector::zeros(r);
        for i in 0..r {
            let mut acc = 0.0;
            for j in 0..n {
                acc += t.get(i, j) * cache.h.get(i, j);
            }
            d_gate.set(i, acc);
        }
        // dL/dWd = (g ⊙ t) · x^T
        let t_gated = t.scale_rows(&self.gate);
        let d_wd = t_gated.matmul(&x.transpose())?;
        // dL/dx = Wd^T · (g ⊙ t)
        let grad_x = self.wd.transpose().matmul(&t_gated)?;

        Ok((AdapterGrads { d_wd, d_wu, d_gate }, grad_x))
    }
}

/// Entrywise soft-threshold with threshold `xi >= 0`:
/// `x - xi` above `xi`, `x + xi` at or below `-xi`, and a literal `0.0` in
/// between, so thresholded entries compare exactly equal to zero.
pub fn soft_threshold(x: &Vector, xi: f64) -> Result<Vector> {
    if !(xi >= 0.0) || !xi.is_finite() {
        return Err(Error::InvalidParam {
            name: "xi",
            value: xi,
            reason: "threshold must be non-negative and finite",
        });
    }
    let mut out = Vector::zeros(x.len());
    for i in 0..x.len() {
        let v = x.get(i);
        let t = if v > xi {
            v - xi
        } else if v > -xi {
            0.0
        } else {
            v + xi
        };
        out.set(i, t);
    }
    Ok(out)
}

/// One proximal gate step: gradient descent on the data loss followed by
/// soft-thresholding, `g' = T_{eta*lambda}(g - eta * d_gate)`.
pub fn prox_gate_update(gate: &Vector, d_gate: &Vector, eta: f64, lambda: f64) -> Result<Vector> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::InvalidParam {
            name: "eta",
            value: eta,
            reason: "prox step size must be positive and finite",
        });
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidParam {
            name: "lambda",
            value: lambda,
            reason: "sparsity weight must be non-negative and finite",
        });
    }
    if gate.len() != d_gate.len() {
        return Err(Error::ShapeMismatch {
            op: "prox_gate_update",
            expected: format!("gradient of length {}", gate.len()),
            got: format!("length {}", d_gate.len()),
        });
    }
    let mut stepped = Vector::zeros(gate.len());
    for i in 0..gate.len() {
        stepped.set(i, gate.get(i) - eta * d_gate.get(i));
    }
    soft_threshold(&stepped, eta * lambda)
}

/// The objective the proximal step minimizes in closed form:
/// `eta*lambda*‖c‖₁ + ½‖c - (gate_prev - eta*d_gate)‖₂²`.
pub fn prox_objective(
    candidate: &Vector,
    gate_prev: &Vector,
    d_gate: &Vector,
    eta: f64,
    lambda: f64,
) -> Result<f64> {
    if candidate.len() != gate_prev.len() || gate_prev.len() != d_gate.len() {
        return Err(Error::ShapeMismatch {
            op: "prox_objective",
            expected: format!("vectors of length {}", gate_prev.len()),
            got: format!(
                "candidate {}, d_gate {}",
                candidate.len(),
                d_gate.len()
            ),
        });
    }
    let mut quad = 0.0;
    for i in 0..candidate.len() {
        let target = gate_prev.get(i) - eta * d_gate.get(i);
        let d = candidate.get(i) - target;
        quad += d * d;
    }
    Ok(eta * lambda * candidate.l1_norm() + 0.5 * quad)
}

/// Data loss plus the gate sparsity term: `loss0 + lambda * Σ_k ‖g^(k)‖₁`.
pub fn regularized_loss(loss0: f64, gates: &[&Vector], lambda: f64) -> f64 {
    let l1: f64 = gates.iter().map(|g| g.l1_norm()).sum();
    loss0 + lambda * l1
}
