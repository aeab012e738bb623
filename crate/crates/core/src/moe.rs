//! Top-k gating, velocity composition, the load-balancing loss and routing statistics.
//!
//! Routing takes a softmax over all expert logits, keeps the `k` most probable
//! experts (ties go to the lower index) and renormalizes their probabilities.
//! The full softmax is kept for the balancing loss and routing analysis.

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{ensure, Result};

/// Outcome of routing one input.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    /// Selected experts, most probable first.
    pub expert_indices: Vec<usize>,
    /// Renormalized weights aligned with `expert_indices`.
    pub weights: Vec<f64>,
    /// Softmax over all experts.
    pub full_probs: Vec<f64>,
}

impl GateDecision {
    pub fn k(&self) -> usize {
        self.expert_indices.len()
    }

    /// Weight assigned to `expert`, zero if it was not selected.
    pub fn weight_of(&self, expert: usize) -> f64 {
        self.expert_indices
            .iter()
            .position(|&e| e == expert)
            .map_or(0.0, |j| self.weights[j])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MoeConfig {
    pub experts: usize,
    pub top_k: usize,
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.top_k >= 1 && self.top_k <= self.experts,
            "top-k {} must lie in [1, {}]",
            self.top_k,
            self.experts
        );
        Ok(())
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Indices of the `k` largest probabilities, largest first, lower index on ties.
pub fn top_k_indices<T: Real>(probs: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    // stable sort keeps lower indices first among equal probabilities
    idx.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap_or(std::cmp::Ordering::Equal));
    idx.truncate(k);
    idx
}

/// Route from a probability row (already softmaxed).
pub fn decide(full_probs: Vec<f64>, k: usize) -> Result<GateDecision> {
    let n = full_probs.len();
    ensure!(k >= 1 && k <= n, "top-k {k} must lie in [1, {n}]");
    let expert_indices = top_k_indices(&full_probs, k);
    let total: f64 = expert_indices.iter().map(|&i| full_probs[i]).sum();
    let weights = expert_indices.iter().map(|&i| full_probs[i] / total).collect();
    Ok(GateDecision {
        expert_indices,
        weights,
        full_probs,
    })
}

/// Route from raw gate logits.
pub fn gate(logits: &[f64], k: usize) -> Result<GateDecision> {
    ensure!(!logits.is_empty(), "gate needs at least one expert");
    decide(softmax(logits), k)
}

/// Weighted sum of the selected experts' outputs.
pub fn compose_velocity(decision: &GateDecision, expert_outputs: &[Vec<f64>]) -> Result<Vec<f64>> {
    ensure!(
        expert_outputs.len() == decision.k(),
        "{} expert outputs for {} selected experts",
        expert_outputs.len(),
        decision.k()
    );
    let dim = expert_outputs.first().map_or(0, |o| o.len());
    let mut out = vec![0.0; dim];
    for (w, o) in decision.weights.iter().zip(expert_outputs) {
        ensure!(o.len() == dim, "expert outputs differ in length");
        for (acc, v) in out.iter_mut().zip(o) {
            *acc += w * v;
        }
    }
    Ok(out)
}

/// Squared coefficient of variation of per-expert importance, where importance
/// is the batch sum of each expert's full softmax probability. Uses the
/// population standard deviation.
pub fn load_balance_loss(batch_full_probs: &[Vec<f64>]) -> Result<f64> {
    ensure!(!batch_full_probs.is_empty(), "load balancing needs a non-empty batch");
    let n = batch_full_probs[0].len();
    ensure!(n > 0, "load balancing needs at least one expert");
    let mut importance = vec![0.0; n];
    for row in batch_full_probs {
        ensure!(row.len() == n, "probability rows differ in length");
        for (acc, p) in importance.iter_mut().zip(row) {
            *acc += p;
        }
    }
    let mean = importance.iter().sum::<f64>() / n as f64;
    let var = importance.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    Ok(var / (mean * mean))
}

/// Graph form of [`load_balance_loss`] over a `[batch, experts]` probability node.
pub fn load_balance_graph<T: Real>(g: &mut Graph<T>, probs: Var) -> Result<Var> {
    ensure!(g.value(probs).rows() > 0, "load balancing needs a non-empty batch");
    let importance = g.col_sums(probs);
    let n = g.value(importance).cols();
    let total = g.sum(importance);
    let mean = g.scale(total, T::one() / T::from_usize(n).unwrap());
    let centered = g.sub(importance, mean)?;
    let sq = g.square(centered);
    let var = g.mean(sq);
    let mean_sq = g.square(mean);
    g.div(var, mean_sq)
}

/// Selected-expert weights for a batch of probability rows, as graph nodes.
/// Returns the `[batch, k]` weight node and the per-row selections.
pub fn route_graph<T: Real>(g: &mut Graph<T>, probs: Var, k: usize) -> Result<(Var, Vec<Vec<usize>>)> {
    let p = g.value(probs);
    let n = p.cols();
    ensure!(k >= 1 && k <= n, "top-k {k} must lie in [1, {n}]");
    let selected: Vec<Vec<usize>> = (0..p.rows()).map(|r| top_k_indices(p.row_slice(r), k)).collect();
    let w = g.topk_renorm(probs, &selected)?;
    Ok((w, selected))
}

/// Decisions read back from graph values.
pub fn decisions_from<T: Real>(probs: &Tensor<T>, weights: &Tensor<T>, selected: &[Vec<usize>]) -> Vec<GateDecision> {
    selected
        .iter()
        .enumerate()
        .map(|(r, sel)| GateDecision {
            expert_indices: sel.clone(),
            weights: weights.row_slice(r).iter().map(|v| v.to_f64_lossy()).collect(),
            full_probs: probs.row_slice(r).iter().map(|v| v.to_f64_lossy()).collect(),
        })
        .collect()
}

/// Statistic used for per-class routing tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoutingStat {
    /// Renormalized weight mass of the selected experts.
    Weight,
    /// Number of times each expert is selected.
    Count,
}

/// Per-class percentage of routing mass per expert; each non-empty class row sums to 100.
/// Classes without any spot get a row of zeros.
pub fn routing_distribution(
    decisions: &[GateDecision],
    labels: &[usize],
    n_classes: usize,
    n_experts: usize,
    stat: RoutingStat,
) -> Result<Vec<Vec<f64>>> {
    ensure!(!decisions.is_empty(), "routing distribution over no decisions");
    ensure!(
        decisions.len() == labels.len(),
        "{} decisions for {} labels",
        decisions.len(),
        labels.len()
    );
    let mut mass = vec![vec![0.0; n_experts]; n_classes];
    for (d, &label) in decisions.iter().zip(labels) {
        ensure!(label < n_classes, "unknown class label {label}");
        for (&e, &w) in d.expert_indices.iter().zip(&d.weights) {
            ensure!(e < n_experts, "expert index {e} >= {n_experts}");
            mass[label][e] += match stat {
                RoutingStat::Weight => w,
                RoutingStat::Count => 1.0,
            };
        }
    }
    for row in &mut mass {
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            for v in row.iter_mut() {
                *v *= 100.0 / total;
            }
        }
    }
    Ok(mass)
}

/// CSV of a routing table: header `class,expert_0,...`, one row per class.
pub fn routing_csv(class_names: &[String], table: &[Vec<f64>]) -> String {
    let n = table.first().map_or(0, |r| r.len());
    let mut s = String::from("class");
    for e in 0..n {
        s.push_str(&format!(",expert_{e}"));
    }
    s.push('\n');
    for (name, row) in class_names.iter().zip(table) {
        s.push_str(name);
        for v in row {
            s.push_str(&format!(",{v:.4}"));
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top1_of_two() {
        let d = gate(&[2.0, 1.0], 1).unwrap();
        assert_eq!(d.expert_indices, vec![0]);
        assert_eq!(d.weights, vec![1.0]);
        let p0 = 1.0 / (1.0 + (-1f64).exp());
        assert!((d.full_probs[0] - p0).abs() < 1e-15);
    }

    #[test]
    fn k_equals_n_keeps_full_softmax() {
        let logits = [0.3, -1.2, 2.0, 0.0];
        let d = gate(&logits, 4).unwrap();
        for (&e, &w) in d.expert_indices.iter().zip(&d.weights) {
            assert!((w - d.full_probs[e]).abs() < 1e-15);
        }
    }

    #[test]
    fn ties_prefer_lower_index() {
        let d = gate(&[0.0; 6], 2).unwrap();
        assert_eq!(d.expert_indices, vec![0, 1]);
        assert_eq!(d.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn k_larger_than_n_is_rejected() {
        assert!(gate(&[0.0, 1.0], 3).is_err());
        assert!(MoeConfig { experts: 2, top_k: 3 }.validate().is_err());
        assert!(MoeConfig { experts: 2, top_k: 0 }.validate().is_err());
    }

    #[test]
    fn compose_examples() {
        let one_hot = GateDecision {
            expert_indices: vec![3],
            weights: vec![1.0],
            full_probs: vec![0.0, 0.0, 0.0, 1.0],
        };
        assert_eq!(compose_velocity(&one_hot, &[vec![1.5, -2.0]]).unwrap(), vec![1.5, -2.0]);
        let half = GateDecision {
            expert_indices: vec![0, 1],
            weights: vec![0.5, 0.5],
            full_probs: vec![0.5, 0.5],
        };
        assert_eq!(compose_velocity(&half, &[vec![2.0, 0.0], vec![0.0, 4.0]]).unwrap(), vec![1.0, 2.0]);
        let mix = GateDecision {
            expert_indices: vec![0, 1],
            weights: vec![0.3, 0.7],
            full_probs: vec![0.3, 0.7],
        };
        let v = compose_velocity(&mix, &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((v[0] - 0.3).abs() < 1e-15 && (v[1] - 0.7).abs() < 1e-15);
        assert!(compose_velocity(&mix, &[vec![1.0, 0.0]]).is_err());
    }

    #[test]
    fn balance_closed_forms() {
        let uniform = vec![vec![1.0 / 3.0; 3]; 5];
        assert!(load_balance_loss(&uniform).unwrap().abs() < 1e-15);
        let collapsed = vec![vec![1.0, 0.0]; 7];
        assert_eq!(load_balance_loss(&collapsed).unwrap(), 1.0);
        assert!(load_balance_loss(&[]).is_err());
    }

    #[test]
    fn balance_graph_matches_plain() {
        let rows = vec![vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3], vec![0.25, 0.25, 0.5]];
        let mut g = Graph::<f64>::new();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let p = g.constant(Tensor::matrix(3, 3, flat).unwrap());
        let l = load_balance_graph(&mut g, p).unwrap();
        assert!((g.value(l).item() - load_balance_loss(&rows).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn routing_one_hot_and_uniform() {
        let hot = gate(&[50.0, 0.0, 0.0], 1).unwrap();
        let t = routing_distribution(&[hot.clone(), hot], &[0, 0], 1, 3, RoutingStat::Weight).unwrap();
        assert_eq!(t[0], vec![100.0, 0.0, 0.0]);
        let uni = gate(&[0.0; 4], 4).unwrap();
        let t = routing_distribution(&[uni], &[0], 1, 4, RoutingStat::Weight).unwrap();
        for v in &t[0] {
            assert!((v - 25.0).abs() < 1e-12);
        }
    }

    #[test]
    fn routing_rejects_unknown_label() {
        let d = gate(&[0.0, 1.0], 1).unwrap();
        assert!(routing_distribution(&[d], &[2], 2, 2, RoutingStat::Count).is_err());
    }

    #[test]
    fn routing_counts_match_direct_counting() {
        // class 0: experts 0,0,1 ; class 1: experts 1,1
        let pick = |e: usize| gate(if e == 0 { &[9.0, 0.0] } else { &[0.0, 9.0] }, 1).unwrap();
        let ds = vec![pick(0), pick(0), pick(1), pick(1), pick(1)];
        let labels = vec![0, 0, 0, 1, 1];
        for stat in [RoutingStat::Count, RoutingStat::Weight] {
            let t = routing_distribution(&ds, &labels, 2, 2, stat).unwrap();
            assert!((t[0][0] - 200.0 / 3.0).abs() < 1e-9);
            assert!((t[0][1] - 100.0 / 3.0).abs() < 1e-9);
            assert_eq!(t[1], vec![0.0, 100.0]);
        }
    }

    #[test]
    fn routing_csv_layout() {
        let s = routing_csv(&["A".into()], &[vec![100.0, 0.0]]);
        assert_eq!(s, "class,expert_0,expert_1\nA,100.0000,0.0000\n");
    }
}
