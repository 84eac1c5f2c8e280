//! Synthetic tasks with known structure: a planted low-rank regression
//! problem (the frozen base weight is perturbed by a hidden low-rank update
//! the adapter must recover) and a two-class Gaussian blob classification
//! problem routed through a frozen two-layer net.
//!
//! All randomness comes from one caller-supplied stream, drawn in a fixed
//! documented order, so a seed pins every byte of the generated task.

use serde::{Deserialize, Serialize};

use crate::adapter::SoraAdapter;
use crate::error::{Error, Result};
use crate::model::{Dataset, Layer, LayerAdapter, Targets, TinyModel, Task};
use crate::numerics::{Matrix, SeededRng};

/// Regression task: `y = (w0 + delta_star) x + noise`, with `delta_star` of
/// known rank. The hidden factors are scaled by `(p*q)^(-1/4)` so the
/// planted update has unit-order singular values regardless of size — the
/// scale at which the default step sizes are stable. Draw order: `w0`, the
/// two factors of `delta_star`, train inputs, train noise, eval inputs,
/// eval noise.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlantedTask {
    pub p: usize,
    pub q: usize,
    pub true_rank: usize,
    pub w0: Matrix,
    pub delta_star: Matrix,
    pub train: Dataset,
    pub eval: Dataset,
    pub noise_sigma: f64,
}

impl PlantedTask {
    /// Expected squared-residual loss of the exact solution under the
    /// per-column loss convention: each of the `p` output coordinates
    /// contributes `sigma^2`.
    pub fn noise_floor(&self) -> f64 {
        self.p as f64 * self.noise_sigma * self.noise_sigma
    }
}

pub fn gen_planted_task(
    p: usize,
    q: usize,
    true_rank: usize,
    n_train: usize,
    n_eval: usize,
    noise_sigma: f64,
    rng: &mut SeededRng,
) -> Result<PlantedTask> {
    if p == 0 || q == 0 {
        return Err(Error::InvalidConfig(format!(
            "planted task needs positive dimensions, got p = {p}, q = {q}"
        )));
    }
    if true_rank > p.min(q) {
        return Err(Error::InvalidConfig(format!(
            "true_rank {true_rank} exceeds min(p, q) = {}",
            p.min(q)
        )));
    }
    if n_train == 0 || n_eval == 0 {
        return Err(Error::InvalidConfig(format!(
            "planted task needs nonempty splits, got n_train = {n_train}, n_eval = {n_eval}"
        )));
    }
    if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "noise_sigma must be finite and nonnegative, got {noise_sigma}"
        )));
    }

    let w0 = rng.normal_matrix(p, q, 1.0);
    let delta_star = if true_rank == 0 {
        Matrix::zeros(p, q)
    } else {
        let s = ((p * q) as f64).powf(-0.25);
        let a = rng.normal_matrix(p, true_rank, s);
        let b = rng.normal_matrix(true_rank, q, s);
        a.matmul(&b)?
    };
    let target_map = w0.add(&delta_star)?;

    let split = |n: usize, rng: &mut SeededRng| -> Result<Dataset> {
        let x = rng.normal_matrix(q, n, 1.0);
        let mut y = target_map.matmul(&x)?;
        if noise_sigma > 0.0 {
            y = y.add(&rng.normal_matrix(p, n, noise_sigma))?;
        }
        Dataset::new(x, Targets::Values(y))
    };
    let train = split(n_train, rng)?;
    let eval = split(n_eval, rng)?;

    Ok(PlantedTask {
        p,
        q,
        true_rank,
        w0,
        delta_star,
        train,
        eval,
        noise_sigma,
    })
}

/// Single gated-adapter model over the task's frozen base weight.
pub fn planted_model(task: &PlantedTask, r_max: usize, rng: &mut SeededRng) -> Result<TinyModel> {
    let adapter = SoraAdapter::init(task.w0.clone(), r_max, rng)?;
    TinyModel::new(
        vec![Layer {
            label: "dense".into(),
            adapter: LayerAdapter::Sora(adapter),
        }],
        None,
        Task::Regression,
    )
}

/// Two balanced Gaussian clusters on an axis drawn at random; labels
/// interleave 0, 1, 0, 1, … so every batch prefix stays balanced. Draw
/// order: separation axis, train points, eval points.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BlobTask {
    pub dim: usize,
    pub separation: f64,
    pub spread: f64,
    pub train: Dataset,
    pub eval: Dataset,
}

pub fn gen_blob_task(
    dim: usize,
    n_train: usize,
    n_eval: usize,
    separation: f64,
    spread: f64,
    rng: &mut SeededRng,
) -> Result<BlobTask> {
    if dim == 0 {
        return Err(Error::InvalidConfig("blob task needs a positive dimension".into()));
    }
    if n_train == 0 || n_eval == 0 {
        return Err(Error::InvalidConfig(format!(
            "blob task needs nonempty splits, got n_train = {n_train}, n_eval = {n_eval}"
        )));
    }
    if !(separation > 0.0) || !separation.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "separation must be positive, got {separation}"
        )));
    }
    if !(spread > 0.0) || !spread.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "spread must be positive, got {spread}"
        )));
    }

    let axis = rng.normal_vector(dim, 1.0);
    let norm = axis.l2_norm();
    if norm == 0.0 {
        return Err(Error::InvalidConfig("degenerate zero separation axis".into()));
    }
    // Class c sits at (-1)^c * separation * unit axis.
    let split = |n: usize, rng: &mut SeededRng| -> Result<Dataset> {
        let mut x = Matrix::zeros(dim, n);
        let mut labels = Vec::with_capacity(n);
        for j in 0..n {
            let class = j % 2;
            let sign = if class == 0 { 1.0 } else { -1.0 };
            for i in 0..dim {
                let mean = sign * separation * axis.get(i) / norm;
                x.set(i, j, mean + spread * rng.standard_normal());
            }
            labels.push(class);
        }
        Dataset::new(x, Targets::Classes(labels))
    };
    let train = split(n_train, rng)?;
    let eval = split(n_eval, rng)?;
    Ok(BlobTask {
        dim,
        separation,
        spread,
        train,
        eval,
    })
}

/// Two frozen layers, each wearing a gated adapter, feeding a trainable
/// two-row head. Draw order: layer-1 base, layer-1 adapter, layer-2 base,
/// layer-2 adapter, head.
pub fn blob_model(
    task: &BlobTask,
    hidden: usize,
    r_max: usize,
    rng: &mut SeededRng,
) -> Result<TinyModel> {
    if hidden == 0 {
        return Err(Error::InvalidConfig("hidden width must be positive".into()));
    }
    let w1 = rng.normal_matrix(hidden, task.dim, (1.0 / task.dim as f64).sqrt());
    let layer1 = SoraAdapter::init(w1, r_max, rng)?;
    let w2 = rng.normal_matrix(hidden, hidden, (1.0 / hidden as f64).sqrt());
    let layer2 = SoraAdapter::init(w2, r_max, rng)?;
    let head = rng.normal_matrix(2, hidden, (1.0 / hidden as f64).sqrt());
    TinyModel::new(
        vec![
            Layer {
                label: "layer1".into(),
                adapter: LayerAdapter::Sora(layer1),
            },
            Layer {
                label: "layer2".into(),
                adapter: LayerAdapter::Sora(layer2),
            },
        ],
        Some(head),
        Task::Classification,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::numeric_rank;

    #[test]
    fn planted_task_shapes_and_rank() {
        let mut rng = SeededRng::new(5);
        let t = gen_planted_task(9, 7, 3, 20, 10, 0.01, &mut rng).unwrap();
        assert_eq!((t.w0.rows(), t.w0.cols()), (9, 7));
        assert_eq!((t.delta_star.rows(), t.delta_star.cols()), (9, 7));
        assert_eq!(t.train.len(), 20);
        assert_eq!(t.eval.len(), 10);
        // Generic Gaussian factors make the planted rank exact.
        assert_eq!(numeric_rank(&t.delta_star, 1e-10).unwrap(), 3);
    }

    #[test]
    fn zero_true_rank_plants_nothing() {
        let mut rng = SeededRng::new(6);
        let t = gen_planted_task(4, 5, 0, 8, 8, 0.0, &mut rng).unwrap();
        assert_eq!(t.delta_star.max_abs(), 0.0);
        // Noiseless targets then come straight from w0.
        let expect = t.w0.matmul(&t.train.x).unwrap();
        if let Targets::Values(y) = &t.train.y {
            assert_eq!(expect.max_abs_diff(y), 0.0);
        } else {
            panic!("regression targets expected");
        }
    }

    #[test]
    fn same_seed_same_task_different_seed_differs() {
        let t1 = gen_planted_task(6, 6, 2, 12, 6, 0.05, &mut SeededRng::new(7)).unwrap();
        let t2 = gen_planted_task(6, 6, 2, 12, 6, 0.05, &mut SeededRng::new(7)).unwrap();
        let t3 = gen_planted_task(6, 6, 2, 12, 6, 0.05, &mut SeededRng::new(8)).unwrap();
        assert!(t1.w0.bits_eq(&t2.w0));
        assert!(t1.train.x.bits_eq(&t2.train.x));
        assert!(!t1.w0.bits_eq(&t3.w0));
    }

    #[test]
    fn train_and_eval_splits_are_distinct_draws() {
        let mut rng = SeededRng::new(9);
        let t = gen_planted_task(4, 4, 1, 6, 6, 0.0, &mut rng).unwrap();
        assert!(!t.train.x.bits_eq(&t.eval.x));
    }

    #[test]
    fn planted_validation_rejects_bad_shapes() {
        let mut rng = SeededRng::new(10);
        assert!(gen_planted_task(0, 4, 0, 4, 4, 0.0, &mut rng).is_err());
        assert!(gen_planted_task(4, 4, 5, 4, 4, 0.0, &mut rng).is_err());
        assert!(gen_planted_task(4, 4, 2, 0, 4, 0.0, &mut rng).is_err());
        assert!(gen_planted_task(4, 4, 2, 4, 4, -0.1, &mut rng).is_err());
    }

    #[test]
    fn noise_floor_scales_with_output_dim() {
        let mut rng = SeededRng::new(11);
        let t = gen_planted_task(32, 32, 3, 8, 8, 0.01, &mut rng).unwrap();
        assert!((t.noise_floor() - 32.0 * 1e-4).abs() < 1e-18);
    }

    #[test]
    fn blob_labels_interleave_for_balance() {
        let mut rng = SeededRng::new(12);
        let t = gen_blob_task(5, 10, 7, 2.0, 1.0, &mut rng).unwrap();
        if let Targets::Classes(labels) = &t.train.y {
            assert_eq!(labels, &vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1]);
        } else {
            panic!("class targets expected");
        }
        if let Targets::Classes(labels) = &t.eval.y {
            assert_eq!(labels.iter().filter(|&&c| c == 0).count(), 4);
            assert_eq!(labels.iter().filter(|&&c| c == 1).count(), 3);
        } else {
            panic!("class targets expected");
        }
    }

    #[test]
    fn blob_classes_sit_on_opposite_sides() {
        let mut rng = SeededRng::new(13);
        let t = gen_blob_task(8, 40, 4, 4.0, 0.5, &mut rng).unwrap();
        // Project each point onto the empirical class-0 mean direction; the
        // two classes must separate with this much margin and so little
        // spread.
        let x = &t.train.x;
        let labels = match &t.train.y {
            Targets::Classes(l) => l.clone(),
            _ => unreachable!(),
        };
        let mut mean0 = vec![0.0; 8];
        let mut n0 = 0.0;
        for j in 0..x.cols() {
            if labels[j] == 0 {
                for (i, m) in mean0.iter_mut().enumerate() {
                    *m += x.get(i, j);
                }
                n0 += 1.0;
            }
        }
        for m in &mut mean0 {
            *m /= n0;
        }
        for j in 0..x.cols() {
            let proj: f64 = (0..8).map(|i| x.get(i, j) * mean0[i]).sum();
            if labels[j] == 0 {
                assert!(proj > 0.0, "class 0 point on wrong side");
            } else {
                assert!(proj < 0.0, "class 1 point on wrong side");
            }
        }
    }

    #[test]
    fn blob_model_classifies_shapes() {
        let mut rng = SeededRng::new(14);
        let t = gen_blob_task(6, 8, 4, 2.0, 1.0, &mut rng).unwrap();
        let model = blob_model(&t, 10, 3, &mut rng).unwrap();
        assert_eq!(model.in_dim(), 6);
        assert_eq!(model.out_dim(), 2);
        let (out, _) = model.forward(&t.train.x).unwrap();
        assert_eq!((out.rows(), out.cols()), (2, 8));
    }
}
