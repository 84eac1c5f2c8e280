//! Post-training rank removal and rank reporting.
//!
//! Gates that landed on exact zero index ranks that contribute nothing: drop
//! those rows of `W_d` and columns of `W_u`, fold the surviving gate entries
//! into `W_u`, and the module becomes a plain low-rank pair whose output
//! matches the unpruned adapter on every input.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::SoraAdapter;
use crate::error::{Error, Result};
use crate::model::{LayerAdapter, TinyModel};
use crate::numerics::{Matrix, Vector};

/// Inference-only module left after pruning: `z = Wu_eff (Wd_tilde x)` where
/// `Wu_eff = W̃_u diag(g̃)` already carries the surviving gate values.
/// `retained_rank` may be zero, in which case the increment is identically
/// zero and no factors are stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrunedAdapter {
    p: usize,
    q: usize,
    retained_rank: usize,
    /// `(wd_tilde, wu_eff)`; absent exactly when `retained_rank == 0`.
    factors: Option<(Matrix, Matrix)>,
}

impl PrunedAdapter {
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn retained_rank(&self) -> usize {
        self.retained_rank
    }

    pub fn wd_tilde(&self) -> Option<&Matrix> {
        self.factors.as_ref().map(|(wd, _)| wd)
    }

    pub fn wu_eff(&self) -> Option<&Matrix> {
        self.factors.as_ref().map(|(_, wu)| wu)
    }

    /// Increment for a `q x n` batch.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.q {
            return Err(Error::ShapeMismatch {
                op: "PrunedAdapter::forward",
                expected: format!("input with {} rows", self.q),
                got: format!("{}x{}", x.rows(), x.cols()),
            });
        }
        match &self.factors {
            Some((wd, wu)) => wu.matmul(&wd.matmul(x)?),
            None => Ok(Matrix::zeros(self.p, x.cols())),
        }
    }
}

/// Indices of gate entries that are exactly zero, ascending.
pub fn zero_index_set(gate: &Vector) -> Vec<usize> {
    (0..gate.len()).filter(|&i| gate.get(i) == 0.0).collect()
}

/// Ranks that are still live (gate entry not exactly zero): `‖g‖₀`.
pub fn effective_rank(adapter: &SoraAdapter) -> usize {
    adapter.gate().count_nonzero()
}

/// Drop the zero-gated ranks and fold the surviving gate into the
/// up-projection. Rank zero (every gate entry zero) is a valid result.
pub fn prune(adapter: &SoraAdapter) -> PrunedAdapter {
    let (p, q) = (adapter.p(), adapter.q());
    let keep: Vec<usize> = (0..adapter.r_max())
        .filter(|&i| adapter.gate().get(i) != 0.0)
        .collect();
    if keep.is_empty() {
        return PrunedAdapter {
            p,
            q,
            retained_rank: 0,
            factors: None,
        };
    }
    let r = keep.len();
    let mut wd_tilde = Matrix::zeros(r, q);
    let mut wu_eff = Matrix::zeros(p, r);
    for (new_i, &old_i) in keep.iter().enumerate() {
        for j in 0..q {
            wd_tilde.set(new_i, j, adapter.wd().get(old_i, j));
        }
        let g = adapter.gate().get(old_i);
        for row in 0..p {
            wu_eff.set(row, new_i, adapter.wu().get(row, old_i) * g);
        }
    }
    PrunedAdapter {
        p,
        q,
        retained_rank: r,
        factors: Some((wd_tilde, wu_eff)),
    }
}

/// Prune every gated layer of a model, leaving other layers untouched. The
/// result forwards identically (up to rounding in the gate fold) but is
/// inference-only wherever a gated adapter used to be.
pub fn prune_model(model: &TinyModel) -> Result<TinyModel> {
    let layers = model
        .layers()
        .iter()
        .map(|l| {
            let adapter = match &l.adapter {
                LayerAdapter::Sora(a) => LayerAdapter::Pruned {
                    w0: a.w0().clone(),
                    module: prune(a),
                },
                other => other.clone(),
            };
            crate::model::Layer {
                label: l.label.clone(),
                adapter,
            }
        })
        .collect();
    TinyModel::new(layers, model.head().cloned(), model.task())
}

/// One cell of a rank report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub layer: usize,
    pub weight_type: String,
    /// Retained rank; a mean over models, so fractional when models disagree.
    pub rank: f64,
}

/// Per-(layer, weight-type) retained ranks, ready for heatmap rendering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub entries: Vec<RankEntry>,
}

fn layer_rank(adapter: &LayerAdapter) -> usize {
    match adapter {
        LayerAdapter::Sora(a) => effective_rank(a),
        LayerAdapter::Lora(a) => a.rank(),
        LayerAdapter::Pruned { module, .. } => module.retained_rank(),
    }
}

/// Rank grid over `(layer index, weight type)`. All models must share the
/// same labeling; each cell averages the retained rank across models.
pub fn rank_heatmap(models: &[&TinyModel]) -> Result<RankReport> {
    if models.is_empty() {
        return Err(Error::InvalidConfig("rank_heatmap needs at least one model".into()));
    }
    let labels: Vec<(usize, &str)> = models[0]
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| (i, l.label.as_str()))
        .collect();
    for (mi, m) in models.iter().enumerate().skip(1) {
        let theirs: Vec<(usize, &str)> = m
            .layers()
            .iter()
            .enumerate()
            .map(|(i, l)| (i, l.label.as_str()))
            .collect();
        if theirs != labels {
            return Err(Error::InconsistentLabels(format!(
                "model 0 has layers {:?}, model {mi} has {:?}",
                labels, theirs
            )));
        }
    }
    let entries = labels
        .iter()
        .map(|&(idx, label)| {
            let sum: usize = models.iter().map(|m| layer_rank(&m.layers()[idx].adapter)).sum();
            RankEntry {
                layer: idx,
                weight_type: label.to_string(),
                rank: sum as f64 / models.len() as f64,
            }
        })
        .collect();
    Ok(RankReport { entries })
}

impl RankReport {
    /// Sum of all cells — for a single model this is the total retained rank.
    pub fn total_rank(&self) -> f64 {
        self.entries.iter().map(|e| e.rank).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,weight_type,rank\n");
        for e in &self.entries {
            writeln!(out, "{},{},{}", e.layer, e.weight_type, e.rank).unwrap();
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        if header != "layer,weight_type,rank" {
            return Err(Error::SpecParse(format!(
                "bad rank report header: {header:?}"
            )));
        }
        let mut entries = Vec::new();
        for (ln, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::SpecParse(format!(
                    "rank report line {}: expected 3 fields, got {}",
                    ln + 2,
                    parts.len()
                )));
            }
            entries.push(RankEntry {
                layer: parts[0]
                    .parse()
                    .map_err(|e| Error::SpecParse(format!("bad layer index: {e}")))?,
                weight_type: parts[1].to_string(),
                rank: parts[2]
                    .parse()
                    .map_err(|e| Error::SpecParse(format!("bad rank value: {e}")))?,
            });
        }
        Ok(RankReport { entries })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::experiment::write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    fn adapter_with_gate(seed: u64, p: usize, q: usize, gate: Vec<f64>) -> SoraAdapter {
        let mut rng = SeededRng::new(seed);
        let r = gate.len();
        let w0 = rng.normal_matrix(p, q, 1.0);
        let wd = rng.normal_matrix(r, q, 1.0);
        let wu = rng.normal_matrix(p, r, 1.0);
        SoraAdapter::new(w0, wd, wu, Vector::new(gate).unwrap()).unwrap()
    }

    #[test]
    fn zero_index_set_uses_exact_equality() {
        let g = Vector::new(vec![0.0, 1e-300, -0.0, 2.0]).unwrap();
        assert_eq!(zero_index_set(&g), vec![0, 2]);
    }

    #[test]
    fn prune_drops_exactly_the_zero_ranks() {
        let a = adapter_with_gate(1, 4, 5, vec![1.5, 0.0, -0.5, 0.0]);
        let pruned = prune(&a);
        assert_eq!(pruned.retained_rank(), 2);
        assert_eq!(effective_rank(&a), 2);
        let wd = pruned.wd_tilde().unwrap();
        assert_eq!(wd.rows(), 2);
        // Row 0 of the pruned down-projection is row 0 of the original.
        assert_eq!(wd.row(0), a.wd().row(0));
        // Folded gate: wu_eff column 1 = -0.5 * wu column 2.
        let wu = pruned.wu_eff().unwrap();
        for row in 0..4 {
            assert_eq!(wu.get(row, 1), a.wu().get(row, 2) * -0.5);
        }
    }

    #[test]
    fn pruned_forward_matches_unpruned_increment() {
        let a = adapter_with_gate(2, 6, 4, vec![0.7, 0.0, -1.2]);
        let pruned = prune(&a);
        let mut rng = SeededRng::new(3);
        let x = rng.normal_matrix(4, 8, 1.0);
        let (z_full, _) = a.forward(&x).unwrap();
        let z_pruned = pruned.forward(&x).unwrap();
        for i in 0..6 {
            for j in 0..8 {
                let tol = 1e-10 * (1.0 + z_full.get(i, j).abs());
                assert!((z_full.get(i, j) - z_pruned.get(i, j)).abs() <= tol);
            }
        }
    }

    #[test]
    fn all_zero_gate_prunes_to_rank_zero() {
        let a = adapter_with_gate(4, 3, 3, vec![0.0, 0.0, 0.0]);
        let pruned = prune(&a);
        assert_eq!(pruned.retained_rank(), 0);
        let x = Matrix::identity(3);
        let z = pruned.forward(&x).unwrap();
        assert_eq!(z.max_abs(), 0.0);
    }

    #[test]
    fn pruning_twice_changes_nothing() {
        // Rebuild a gated adapter from the pruned factors with a unit gate;
        // its zero set is empty, so a second prune keeps every rank.
        let a = adapter_with_gate(5, 5, 4, vec![1.0, 0.0, 2.0, 0.0]);
        let once = prune(&a);
        let again = prune(
            &SoraAdapter::new(
                a.w0().clone(),
                once.wd_tilde().unwrap().clone(),
                once.wu_eff().unwrap().clone(),
                Vector::ones(once.retained_rank()),
            )
            .unwrap(),
        );
        assert_eq!(again.retained_rank(), once.retained_rank());
        assert!(again.wd_tilde().unwrap().bits_eq(once.wd_tilde().unwrap()));
        // The second fold multiplies by a gate of ones, which is exact.
        assert!(again.wu_eff().unwrap().bits_eq(once.wu_eff().unwrap()));
    }

    #[test]
    fn serialized_size_shrinks_as_more_ranks_go() {
        let gates = [
            vec![1.0, 1.0, 1.0, 1.0],
            vec![1.0, 0.0, 1.0, 1.0],
            vec![1.0, 0.0, 0.0, 1.0],
            vec![0.0, 0.0, 0.0, 0.0],
        ];
        let mut prev = usize::MAX;
        for g in gates {
            let a = adapter_with_gate(6, 5, 5, g);
            let bytes = serde_json::to_vec(&prune(&a)).unwrap().len();
            assert!(bytes <= prev, "size grew: {bytes} > {prev}");
            prev = bytes;
        }
    }

    #[test]
    fn prune_model_swaps_gated_layers_and_keeps_outputs() {
        use crate::model::{Layer, Task, TinyModel};
        let mut rng = SeededRng::new(8);
        let a = adapter_with_gate(8, 4, 4, vec![1.0, 0.0, 0.3]);
        let model = TinyModel::new(
            vec![Layer {
                label: "dense".into(),
                adapter: LayerAdapter::Sora(a),
            }],
            None,
            Task::Regression,
        )
        .unwrap();
        let pruned = prune_model(&model).unwrap();
        match &pruned.layers()[0].adapter {
            LayerAdapter::Pruned { module, .. } => assert_eq!(module.retained_rank(), 2),
            _ => panic!("expected a pruned layer"),
        }
        let x = rng.normal_matrix(4, 5, 1.0);
        let (full, _) = model.forward(&x).unwrap();
        let (folded, _) = pruned.forward(&x).unwrap();
        assert!(full.max_abs_diff(&folded) <= 1e-12 * (1.0 + full.max_abs()));
    }

    #[test]
    fn heatmap_rejects_mismatched_labels() {
        use crate::model::{Layer, Task};
        let mk = |label: &str| {
            let mut rng = SeededRng::new(7);
            let w0 = rng.normal_matrix(3, 3, 1.0);
            let a = SoraAdapter::init(w0, 2, &mut rng).unwrap();
            TinyModel::new(
                vec![Layer {
                    label: label.into(),
                    adapter: LayerAdapter::Sora(a),
                }],
                None,
                Task::Regression,
            )
            .unwrap()
        };
        let m1 = mk("dense");
        let m2 = mk("attn");
        let err = rank_heatmap(&[&m1, &m2]).unwrap_err();
        assert!(matches!(err, Error::InconsistentLabels(_)));
    }

    #[test]
    fn heatmap_csv_round_trips() {
        let report = RankReport {
            entries: vec![
                RankEntry {
                    layer: 0,
                    weight_type: "dense".into(),
                    rank: 3.0,
                },
                RankEntry {
                    layer: 1,
                    weight_type: "dense".into(),
                    rank: 2.5,
                },
            ],
        };
        let csv = report.to_csv();
        assert!(csv.starts_with("layer,weight_type,rank\n"));
        assert_eq!(RankReport::from_csv(&csv).unwrap(), report);
    }
}
