//! Evaluation metrics. Inputs are `[spots, genes]` (or `[samples, dims]`)
//! tensors; all arithmetic is done in `f64`.

use std::fmt::Write as _;

use crate::autodiff::{Real, Tensor};
use crate::error::{ensure, MolfError, Result};

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    ensure!(a.shape() == b.shape(), "shape mismatch {:?} vs {:?}", a.shape(), b.shape());
    Ok(())
}

fn column<T: Real>(m: &Tensor<T>, c: usize) -> Vec<f64> {
    (0..m.rows()).map(|r| m.get(r, c).to_f64_lossy()).collect()
}

fn row_f64<T: Real>(m: &Tensor<T>, r: usize) -> Vec<f64> {
    m.row_slice(r).iter().map(|v| v.to_f64_lossy()).collect()
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

/// Sample Pearson correlation; `None` if either input has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa.sqrt() * sbb.sqrt()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PccReport {
    /// `None` for genes that are constant in either matrix.
    pub per_gene: Vec<Option<f64>>,
    /// Mean over defined genes; `None` if no gene is defined.
    pub mean: Option<f64>,
}

impl PccReport {
    pub fn undefined(&self) -> usize {
        self.per_gene.iter().filter(|p| p.is_none()).count()
    }

    /// Mean over the given genes, skipping undefined ones.
    pub fn mean_over(&self, genes: &[usize]) -> Option<f64> {
        let vals: Vec<f64> = genes.iter().filter_map(|&g| self.per_gene.get(g).copied().flatten()).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

pub fn pearson_per_gene<T: Real>(truth: &Tensor<T>, pred: &Tensor<T>) -> Result<PccReport> {
    same_shape(truth, pred)?;
    ensure!(truth.rows() >= 2, "correlation needs at least 2 spots, got {}", truth.rows());
    let per_gene: Vec<Option<f64>> = (0..truth.cols())
        .map(|c| pearson(&column(truth, c), &column(pred, c)))
        .collect();
    let defined: Vec<f64> = per_gene.iter().flatten().copied().collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(PccReport { per_gene, mean })
}

/// Per-column population variance.
pub fn gene_variances<T: Real>(m: &Tensor<T>) -> Vec<f64> {
    (0..m.cols())
        .map(|c| {
            let col = column(m, c);
            let mean = col.iter().sum::<f64>() / col.len().max(1) as f64;
            col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / col.len().max(1) as f64
        })
        .collect()
}

/// Indices of the `k` highest-variance genes, highest first (ties to lower index).
pub fn top_variance_genes(variances: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..variances.len()).collect();
    idx.sort_by(|&a, &b| variances[b].total_cmp(&variances[a]));
    idx.truncate(k);
    idx
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Tier {
    Low,
    Mid,
    High,
}

impl Tier {
    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Low => "low",
            Tier::Mid => "mid",
            Tier::High => "high",
        }
    }
}

/// Low if `v <= low_max`, High if `v >= high_min`, Mid otherwise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TierBounds {
    pub low_max: f64,
    pub high_min: f64,
}

impl TierBounds {
    /// Bounds of the hallmark-gene variance stratification.
    pub const HALLMARK: TierBounds = TierBounds {
        low_max: 0.9178,
        high_min: 1.0211,
    };

    pub fn assign(&self, v: f64) -> Tier {
        if v <= self.low_max {
            Tier::Low
        } else if v >= self.high_min {
            Tier::High
        } else {
            Tier::Mid
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StratifyMode {
    Thresholds(TierBounds),
    Tertiles,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenePanelStats {
    pub variances: Vec<f64>,
    pub tiers: Vec<Tier>,
    pub bounds: TierBounds,
}

impl GenePanelStats {
    pub fn genes_in(&self, tier: Tier) -> Vec<usize> {
        (0..self.tiers.len()).filter(|&i| self.tiers[i] == tier).collect()
    }
}

pub fn variance_stratify(variances: &[f64], mode: StratifyMode) -> Result<GenePanelStats> {
    ensure!(!variances.is_empty(), "cannot stratify an empty gene panel");
    let n = variances.len();
    let (tiers, bounds) = match mode {
        StratifyMode::Thresholds(b) => (variances.iter().map(|&v| b.assign(v)).collect(), b),
        StratifyMode::Tertiles => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| variances[a].total_cmp(&variances[b]));
            let mut tiers = vec![Tier::Low; n];
            let mut rank = 0;
            while rank < n {
                // Tied variances share the tier of the first of them.
                let v = variances[order[rank]];
                let tier = match 3 * rank / n {
                    0 => Tier::Low,
                    1 => Tier::Mid,
                    _ => Tier::High,
                };
                while rank < n && variances[order[rank]] == v {
                    tiers[order[rank]] = tier;
                    rank += 1;
                }
            }
            let max_of = |t: Tier| (0..n).filter(|&i| tiers[i] == t).map(|i| variances[i]).fold(f64::NEG_INFINITY, f64::max);
            let min_of = |t: Tier| (0..n).filter(|&i| tiers[i] == t).map(|i| variances[i]).fold(f64::INFINITY, f64::min);
            let bounds = TierBounds {
                low_max: max_of(Tier::Low),
                high_min: min_of(Tier::High),
            };
            (tiers, bounds)
        }
    };
    Ok(GenePanelStats {
        variances: variances.to_vec(),
        tiers,
        bounds,
    })
}

/// 1-Wasserstein distance between two equal-size empirical 1-D distributions.
pub fn w1_1d(a: &[f64], b: &[f64]) -> f64 {
    let a = sorted(a.to_vec());
    let b = sorted(b.to_vec());
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Per spot, W1 between the spot's gene values in `truth` and `pred`; averaged over spots.
pub fn mean_w1_per_spot<T: Real>(truth: &Tensor<T>, pred: &Tensor<T>) -> Result<f64> {
    same_shape(truth, pred)?;
    ensure!(truth.rows() > 0 && truth.cols() > 0, "W1 over an empty matrix");
    let total: f64 = (0..truth.rows()).map(|r| w1_1d(&row_f64(truth, r), &row_f64(pred, r))).sum();
    Ok(total / truth.rows() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct W2Report {
    pub per_dim: Vec<f64>,
    pub average: f64,
}

/// Per-dimension W2 between marginals by quantile coupling. Sets of different
/// size are truncated to the smaller count.
pub fn w2_per_dimension<T: Real>(truth: &Tensor<T>, pred: &Tensor<T>) -> Result<W2Report> {
    ensure!(truth.rows() > 0 && pred.rows() > 0, "W2 over an empty sample set");
    ensure!(truth.cols() == pred.cols(), "dimension mismatch {} vs {}", truth.cols(), pred.cols());
    let n = truth.rows().min(pred.rows());
    let per_dim: Vec<f64> = (0..truth.cols())
        .map(|c| {
            let a = sorted(column(truth, c)[..n].to_vec());
            let b = sorted(column(pred, c)[..n].to_vec());
            (a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64).sqrt()
        })
        .collect();
    let average = per_dim.iter().sum::<f64>() / per_dim.len().max(1) as f64;
    Ok(W2Report { per_dim, average })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineReport {
    pub mean: f64,
    /// Spots skipped because either vector has zero norm.
    pub excluded: usize,
}

pub fn cosine_distance<T: Real>(truth: &Tensor<T>, pred: &Tensor<T>) -> Result<CosineReport> {
    same_shape(truth, pred)?;
    let mut total = 0.0;
    let mut used = 0usize;
    for r in 0..truth.rows() {
        let (y, p) = (row_f64(truth, r), row_f64(pred, r));
        let dot: f64 = y.iter().zip(&p).map(|(a, b)| a * b).sum();
        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        let np = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        if ny == 0.0 || np == 0.0 {
            continue;
        }
        total += 1.0 - dot / (ny * np);
        used += 1;
    }
    ensure!(used > 0, "every spot has a zero-norm vector");
    Ok(CosineReport {
        mean: total / used as f64,
        excluded: truth.rows() - used,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JsdMode {
    /// Square root of the divergence, in `[0, 1]`.
    Distance,
    Divergence,
}

/// Jensen-Shannon with base-2 logarithms.
pub fn jsd(p: &[f64], q: &[f64], mode: JsdMode) -> Result<f64> {
    ensure!(p.len() == q.len() && !p.is_empty(), "distributions must be non-empty and of equal length");
    for d in [p, q] {
        ensure!(d.iter().all(|&v| v >= 0.0), "distribution has negative mass");
        let s: f64 = d.iter().sum();
        ensure!((s - 1.0).abs() <= 1e-6, "distribution sums to {s}, not 1");
    }
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter()
            .zip(m)
            .filter(|(&x, _)| x > 0.0)
            .map(|(&x, &y)| x * (x / y).log2())
            .sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let div = (0.5 * kl(p, &m) + 0.5 * kl(q, &m)).clamp(0.0, 1.0);
    Ok(match mode {
        JsdMode::Distance => div.sqrt(),
        JsdMode::Divergence => div,
    })
}

pub fn mse<T: Real>(truth: &Tensor<T>, pred: &Tensor<T>) -> Result<f64> {
    same_shape(truth, pred)?;
    ensure!(truth.numel() > 0, "MSE over an empty matrix");
    let s: f64 = truth
        .data()
        .iter()
        .zip(pred.data())
        .map(|(a, b)| {
            let d = a.to_f64_lossy() - b.to_f64_lossy();
            d * d
        })
        .sum();
    Ok(s / truth.numel() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub w: f64,
    pub mse: f64,
    pub w1: f64,
    pub cos: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
}

impl MetricTable {
    pub fn new(rows: Vec<MetricRow>) -> Result<Self> {
        let t = MetricTable { rows };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, a) in self.rows.iter().enumerate() {
            for b in &self.rows[i + 1..] {
                ensure!(a.w != b.w, "guidance scale {} appears twice", a.w);
            }
        }
        Ok(())
    }

    /// Header `w,mse,w1,cos`, one row per scale.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("w,mse,w1,cos\n");
        for r in &self.rows {
            writeln!(s, "{},{},{},{}", r.w, r.mse, r.w1, r.cos).unwrap();
        }
        s
    }

    /// Parses [`MetricTable::to_csv`] output; `#` lines are comments.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        match lines.next() {
            Some("w,mse,w1,cos") => {}
            other => {
                return Err(MolfError::Validation(format!(
                    "metric table header must be `w,mse,w1,cos`, found {other:?}"
                )))
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let vals: Vec<f64> = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| MolfError::Validation(format!("metric table row {}: {e}", i + 1)))?;
            if vals.len() != 4 {
                return Err(MolfError::Validation(format!(
                    "metric table row {} has {} fields, expected 4",
                    i + 1,
                    vals.len()
                )));
            }
            rows.push(MetricRow {
                w: vals[0],
                mse: vals[1],
                w1: vals[2],
                cos: vals[3],
            });
        }
        MetricTable::new(rows).map_err(|e| MolfError::Validation(e.to_string()))
    }
}
