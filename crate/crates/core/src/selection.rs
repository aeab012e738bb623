//! Guidance-scale selection: keep scales whose W1 is within `(1 + tau)` of
//! the best, then take the lowest cosine distance among them.

use std::fmt;

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{ensure, Result};
use crate::flow::Decoder;
use crate::metrics::{cosine_distance, mean_w1_per_spot, mse, MetricRow, MetricTable};
use crate::sampler::{generate, SampleRequest};
use crate::velocity::{VelocityBatch, VelocityNet};

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionResult {
    pub w: f64,
    /// Smallest W1 in the table.
    pub e_star: f64,
    pub threshold: f64,
    /// Scales passing the W1 filter, in table order.
    pub valid: Vec<f64>,
    pub tau: f64,
    /// How the final pick was decided.
    pub note: String,
}

impl fmt::Display for SelectionResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "w_star: {}", self.w)?;
        writeln!(f, "e_star: {}", self.e_star)?;
        writeln!(f, "tau: {}", self.tau)?;
        writeln!(f, "threshold: {}", self.threshold)?;
        let valid: Vec<String> = self.valid.iter().map(|w| w.to_string()).collect();
        writeln!(f, "valid: {}", valid.join(","))?;
        write!(f, "tie_break: {}", self.note)
    }
}

/// Ties in cosine go to the lower MSE, then to the lower `w`.
pub fn filter_and_rank(table: &MetricTable, tau: f64) -> Result<SelectionResult> {
    ensure!(!table.rows.is_empty(), "cannot select from an empty metric table");
    ensure!(tau >= 0.0, "tolerance {tau} is negative");
    table.validate()?;
    let e_star = table.rows.iter().map(|r| r.w1).fold(f64::INFINITY, f64::min);
    let threshold = (1.0 + tau) * e_star;
    let valid: Vec<&MetricRow> = table.rows.iter().filter(|r| r.w1 <= threshold).collect();
    let best = valid
        .iter()
        .copied()
        .min_by(|a, b| a.cos.total_cmp(&b.cos).then(a.mse.total_cmp(&b.mse)).then(a.w.total_cmp(&b.w)))
        .expect("the W1 minimiser always passes");
    let cos_ties = valid.iter().filter(|r| r.cos == best.cos).count();
    let mse_ties = valid.iter().filter(|r| r.cos == best.cos && r.mse == best.mse).count();
    let note = if cos_ties == 1 {
        "unique cosine minimum".to_string()
    } else if mse_ties == 1 {
        format!("{cos_ties}-way cosine tie broken by MSE")
    } else {
        format!("{cos_ties}-way cosine tie, {mse_ties}-way MSE tie broken by lowest w")
    };
    let result = SelectionResult {
        w: best.w,
        e_star,
        threshold,
        valid: valid.iter().map(|r| r.w).collect(),
        tau,
        note,
    };
    debug_assert!(best.w1 <= threshold);
    Ok(result)
}

/// Metric row for one prediction against the truth.
pub fn evaluate_row(w: f64, truth: &Tensor<f32>, pred: &Tensor<f32>) -> Result<MetricRow> {
    Ok(MetricRow {
        w,
        mse: mse(truth, pred)?,
        w1: mean_w1_per_spot(truth, pred)?,
        cos: cosine_distance(truth, pred)?.mean,
    })
}

/// Generate at every scale with the same per-spot noise and score against
/// `truth`. Predictions are decoded expression when a decoder is given,
/// latent samples otherwise.
#[allow(clippy::too_many_arguments)]
pub fn sweep_cfg(
    scales: &[f64],
    net: &VelocityNet,
    store: &ParamStore<f32>,
    inputs: &VelocityBatch<f32>,
    spot_ids: &[u64],
    truth: &Tensor<f32>,
    decoder: Option<&Decoder<f32>>,
    seed: u64,
    steps: usize,
) -> Result<MetricTable> {
    ensure!(!scales.is_empty(), "no guidance scales to sweep");
    let mut rows = Vec::with_capacity(scales.len());
    for &w in scales {
        let req = SampleRequest { w, steps, seed };
        let out = generate(&req, net, store, inputs, spot_ids, decoder)?;
        let pred = out.expression.unwrap_or(out.latent);
        rows.push(evaluate_row(w, truth, &pred)?);
    }
    MetricTable::new(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: &[(f64, f64, f64, f64)]) -> MetricTable {
        MetricTable::new(
            rows.iter()
                .map(|&(w, mse, w1, cos)| MetricRow { w, mse, w1, cos })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_row() {
        let r = filter_and_rank(&table(&[(4.0, 1.0, 1.0, 1.0)]), 0.05).unwrap();
        assert_eq!(r.w, 4.0);
        assert_eq!(r.valid, vec![4.0]);
    }

    #[test]
    fn tau_extremes() {
        let t = table(&[(1.0, 0.1, 0.10, 0.5), (2.0, 0.1, 0.10, 0.4), (3.0, 0.1, 0.30, 0.1)]);
        assert_eq!(filter_and_rank(&t, 0.0).unwrap().valid, vec![1.0, 2.0]);
        assert_eq!(filter_and_rank(&t, 0.0).unwrap().w, 2.0);
        assert_eq!(filter_and_rank(&t, f64::INFINITY).unwrap().w, 3.0);
    }

    #[test]
    fn tie_chain() {
        let t = table(&[(3.0, 0.2, 0.1, 0.3), (1.0, 0.2, 0.1, 0.3), (2.0, 0.1, 0.1, 0.4)]);
        let r = filter_and_rank(&t, 0.0).unwrap();
        assert_eq!(r.w, 1.0);
        assert!(r.note.contains("lowest w"));
    }

    #[test]
    fn errors() {
        assert!(filter_and_rank(&MetricTable::default(), 0.05).is_err());
        assert!(filter_and_rank(&table(&[(1.0, 0.0, 0.0, 0.0)]), -1.0).is_err());
    }

    #[test]
    fn display_is_structured() {
        let r = filter_and_rank(&table(&[(1.0, 0.1, 0.2, 0.3)]), 0.05).unwrap();
        let s = r.to_string();
        assert!(s.starts_with("w_star: 1\n"));
        assert!(s.contains("valid: 1\n"));
    }
}
