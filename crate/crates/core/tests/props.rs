//! Randomized invariants. Each property states something that must hold for
//! every input, with the checking logic written independently of the code
//! under test wherever a second route exists.

use proptest::prelude::*;

use sora::model::{Dataset, Layer, LayerAdapter, Targets, Task, TinyModel};
use sora::train::{train_epoch, OptimizerState, TrainConfig};
use sora::{
    prox_gate_update, soft_threshold, svd_values, Checkpoint, Matrix, ScheduleConfig, SeededRng,
    SoraAdapter, Vector,
};

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0..50.0f64, len)
}

fn vector(max_len: usize) -> impl Strategy<Value = Vector> {
    (1..=max_len).prop_flat_map(|n| finite_vec(n).prop_map(|d| Vector::new(d).unwrap()))
}

fn matrix(max_dim: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_dim, 1..=max_dim).prop_flat_map(|(r, c)| {
        finite_vec(r * c).prop_map(move |d| Matrix::from_vec(r, c, d).unwrap())
    })
}

proptest! {
    /// Soft-thresholding moves every coordinate at most `xi` toward zero and
    /// never across it.
    #[test]
    fn soft_threshold_shrinks_without_sign_flips(
        v in vector(24),
        xi in 0.0..10.0f64,
    ) {
        let t = soft_threshold(&v, xi).unwrap();
        for i in 0..v.len() {
            let (x, y) = (v.get(i), t.get(i));
            // Slack covers the rounding of `x - xi` at the magnitude of x.
            prop_assert!((x - y).abs() <= xi + 1e-12 * (1.0 + x.abs()));
            prop_assert!(y.abs() <= x.abs());
            prop_assert!(y == 0.0 || y.signum() == x.signum());
            // Exact zero inside the dead zone, not a denormal leftover.
            if x.abs() <= xi {
                prop_assert!(y == 0.0);
            }
        }
    }

    /// The shrinkage operator is non-expansive: distances never grow.
    #[test]
    fn soft_threshold_is_non_expansive(
        pair in (1usize..=24).prop_flat_map(|n| (finite_vec(n), finite_vec(n))),
        xi in 0.0..10.0f64,
    ) {
        let a = Vector::new(pair.0).unwrap();
        let b = Vector::new(pair.1).unwrap();
        let ta = soft_threshold(&a, xi).unwrap();
        let tb = soft_threshold(&b, xi).unwrap();
        let mut before = 0.0;
        let mut after = 0.0;
        for i in 0..a.len() {
            before += (a.get(i) - b.get(i)).powi(2);
            after += (ta.get(i) - tb.get(i)).powi(2);
        }
        prop_assert!(after <= before + 1e-12);
    }

    /// The prox step beats any random candidate on its own objective.
    #[test]
    fn prox_step_beats_random_candidates(
        trio in (1usize..=16).prop_flat_map(|n| (finite_vec(n), finite_vec(n), finite_vec(n))),
        eta in 1e-3..0.5f64,
        lambda in 0.0..2.0f64,
    ) {
        let g = Vector::new(trio.0).unwrap();
        let d = Vector::new(trio.1).unwrap();
        let cand = Vector::new(trio.2).unwrap();
        let out = prox_gate_update(&g, &d, eta, lambda).unwrap();
        let cost = |c: &Vector| {
            let mut quad = 0.0;
            for i in 0..c.len() {
                let u = g.get(i) - eta * d.get(i);
                quad += (c.get(i) - u).powi(2);
            }
            eta * lambda * c.l1_norm() + 0.5 * quad
        };
        prop_assert!(cost(&out) <= cost(&cand) + 1e-9 * (1.0 + cost(&cand).abs()));
    }

    /// Matrix product against a re-derived triple loop with the opposite
    /// loop nesting and its own accumulation order.
    #[test]
    fn matmul_matches_independent_triple_loop(
        dims in (1usize..=7, 1usize..=7, 1usize..=7),
        seed in 0u64..1u64 << 32,
    ) {
        let (m, k, n) = dims;
        let mut rng = SeededRng::new(seed);
        let a = rng.normal_matrix(m, k, 1.0);
        let b = rng.normal_matrix(k, n, 1.0);
        let fast = a.matmul(&b).unwrap();
        let mut slow = vec![0.0f64; m * n];
        for j in 0..n {
            for l in 0..k {
                let blj = b.get(l, j);
                for i in 0..m {
                    slow[i * n + j] += a.get(i, l) * blj;
                }
            }
        }
        for i in 0..m {
            for j in 0..n {
                let got = fast.get(i, j);
                let want = slow[i * n + j];
                prop_assert!(
                    (got - want).abs() <= 1e-10 * (1.0 + want.abs()),
                    "({i},{j}): {got} vs {want}"
                );
            }
        }
    }

    /// Singular values are transpose-invariant.
    #[test]
    fn singular_values_ignore_transposition(m in matrix(7)) {
        let s1 = svd_values(&m).unwrap();
        let s2 = svd_values(&m.transpose()).unwrap();
        let k = s1.len().min(s2.len());
        let scale = s1.get(0).max(1.0);
        for i in 0..k {
            prop_assert!((s1.get(i) - s2.get(i)).abs() <= 1e-12 * scale);
        }
        for i in k..s1.len() {
            prop_assert!(s1.get(i).abs() <= 1e-12 * scale);
        }
        for i in k..s2.len() {
            prop_assert!(s2.get(i).abs() <= 1e-12 * scale);
        }
    }

    /// Energy check: the Frobenius norm equals the root sum of squared
    /// singular values.
    #[test]
    fn frobenius_norm_equals_singular_value_energy(m in matrix(7)) {
        let s = svd_values(&m).unwrap();
        let energy = s.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let direct = m.frobenius_norm();
        prop_assert!((energy - direct).abs() <= 1e-10 * (1.0 + direct));
    }

    /// The threshold ladder is strictly increasing, capped by `xi_max`, and
    /// reproduces an independently coded repeated-addition walk bit for bit.
    #[test]
    fn threshold_ladder_walks_by_repeated_addition(
        xi0 in 1e-6..1e-2f64,
        delta in 1e-5..5e-3f64,
        steps in 0usize..8,
    ) {
        let xi_max = xi0 + delta * steps as f64;
        let cfg = ScheduleConfig { xi0, xi_max, delta_xi: delta, epochs_per_stage: 1 };
        cfg.validate().unwrap();
        let ladder = cfg.stage_xis();
        let mut expect = Vec::new();
        let mut xi = xi0 + delta;
        while xi <= xi_max {
            expect.push(xi);
            xi += delta;
        }
        prop_assert_eq!(ladder.len(), expect.len());
        for (a, b) in ladder.iter().zip(&expect) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        for w in ladder.windows(2) {
            prop_assert!(w[0] < w[1]);
        }
        prop_assert!(ladder.last().map_or(true, |&l| l <= xi_max));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// A trained state round-trips through checkpoint JSON with identical
    /// bytes, whatever the shapes and optimizer happen to be.
    #[test]
    fn checkpoint_json_is_a_fixed_point(
        seed in 0u64..1u64 << 32,
        p in 2usize..6,
        q in 2usize..6,
        epochs in 1usize..4,
    ) {
        let r_max = p.min(q).min(3);
        let mut rng = SeededRng::new(seed);
        let w0 = rng.normal_matrix(p, q, 1.0);
        let adapter = SoraAdapter::init(w0, r_max, &mut rng).unwrap();
        let mut model = TinyModel::new(
            vec![Layer { label: "l".into(), adapter: LayerAdapter::Sora(adapter) }],
            None,
            Task::Regression,
        ).unwrap();
        let x = rng.normal_matrix(q, 12, 1.0);
        let y = rng.normal_matrix(p, 12, 1.0);
        let data = Dataset::new(x, Targets::Values(y)).unwrap();
        let cfg = TrainConfig { epochs, batch_size: 5, ..TrainConfig::default() };
        let mut opt = OptimizerState::new(&model, cfg.optimizer);
        for _ in 0..epochs {
            train_epoch(&mut model, &data, &cfg, &mut opt).unwrap();
        }
        let ckpt = Checkpoint::new(cfg, model, opt, rng, epochs, 0);
        let json = ckpt.to_json().unwrap();
        let reloaded = Checkpoint::from_json(&json).unwrap();
        prop_assert_eq!(json, reloaded.to_json().unwrap());
    }
}
