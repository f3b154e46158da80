//! Sink and over-smoothing measurements on attention matrices and hidden
//! states.
//!
//! For an `n×n` row-stochastic attention matrix `A` (row = query, column =
//! key) the average outer degree of token `i` is the mean attention it
//! receives, `d_i = Σ_k a_ki / n`, and its attention deviation is the spread
//! of that column normalized by the degree,
//! `Δ_i = sqrt(Σ_k (a_ki − d_i)²) / (n d_i)`. A sink is a token with a large
//! degree and a small deviation: every query attends to it about equally.
//!
//! Over-smoothing is measured with the mean pairwise cosine similarity of
//! token representations and the distance `d_M(H) = ‖(I − eeᵀ)H‖_F` to the
//! subspace of identical rows. One attention layer contracts that distance
//! by at most `sqrt(λ_max)` of `P = Aᵀ(I − eeᵀ)A`, and `λ_max` is bounded
//! below by the largest squared column deviation `max_i Σ_k (a_ki − d_i)²`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{dominant_eigenvalue, Matrix};
use crate::trace::AttentionTrace;

/// Row-sum tolerance for matrices built in memory.
pub const STOCHASTIC_TOLERANCE: f64 = 1e-6;
/// Slack allowed on both inequality checks.
pub const BOUND_SLACK: f64 = 1e-9;

/// Row-stochastic square matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Matrix", into = "Matrix")]
pub struct AttentionMatrix(Matrix);

impl TryFrom<Matrix> for AttentionMatrix {
    type Error = Error;

    fn try_from(m: Matrix) -> Result<Self> {
        AttentionMatrix::new(m)
    }
}

impl From<AttentionMatrix> for Matrix {
    fn from(a: AttentionMatrix) -> Matrix {
        a.0
    }
}

impl AttentionMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        Self::with_tolerance(m, STOCHASTIC_TOLERANCE)
    }

    /// Validates squareness, entries in `[0, 1]` and unit row sums within
    /// `tol`, then renormalizes every row exactly.
    pub fn with_tolerance(mut m: Matrix, tol: f64) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::Shape {
                op: "AttentionMatrix",
                left: m.shape(),
                right: (m.cols(), m.rows()),
            });
        }
        for i in 0..m.rows() {
            let row = m.row_mut(i);
            if let Some(v) = row.iter().find(|v| !v.is_finite() || **v < -tol || **v > 1.0 + tol) {
                return Err(Error::NotStochastic {
                    row: i,
                    reason: format!("entry {v} outside [0, 1]"),
                });
            }
            row.iter_mut().for_each(|v| *v = v.max(0.0));
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > tol {
                return Err(Error::NotStochastic {
                    row: i,
                    reason: format!("row sums to {sum}"),
                });
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        Ok(Self(m))
    }

    pub fn uniform(n: usize) -> Self {
        Self(Matrix::filled(n, n, 1.0 / n as f64))
    }

    pub fn identity(n: usize) -> Self {
        Self(Matrix::identity(n))
    }

    /// Every query puts all of its mass on `sink`.
    pub fn pure_sink(n: usize, sink: usize) -> Self {
        Self(Matrix::from_fn(n, n, |_, j| if j == sink { 1.0 } else { 0.0 }))
    }

    pub fn n(&self) -> usize {
        self.0.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    /// Element-wise mean of equally sized attention matrices.
    pub fn mean_of(mats: &[AttentionMatrix]) -> Result<AttentionMatrix> {
        let first = mats
            .first()
            .ok_or_else(|| Error::InvalidArgument("mean of zero matrices".into()))?;
        let mut acc = Matrix::zeros(first.n(), first.n());
        for m in mats {
            if m.n() != first.n() {
                return Err(Error::InvalidArgument(format!(
                    "inconsistent token counts {} and {}",
                    first.n(),
                    m.n()
                )));
            }
            acc.add_assign(m.matrix());
        }
        AttentionMatrix::new(acc.scale(1.0 / mats.len() as f64))
    }
}

/// Degrees, deviations and the degree ranking of one (possibly head-averaged)
/// attention pattern.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkStats {
    pub outer_degrees: Vec<f64>,
    pub deviations: Vec<f64>,
    /// Token indices by descending degree; ties keep the lower index first.
    pub ranking: Vec<usize>,
}

impl SinkStats {
    pub fn from_attention(a: &AttentionMatrix) -> Self {
        Self::from_parts(outer_degrees(a), attention_deviations(a))
    }

    fn from_parts(outer_degrees: Vec<f64>, deviations: Vec<f64>) -> Self {
        let mut ranking: Vec<usize> = (0..outer_degrees.len()).collect();
        ranking.sort_by(|&a, &b| outer_degrees[b].total_cmp(&outer_degrees[a]));
        Self {
            outer_degrees,
            deviations,
            ranking,
        }
    }

    pub fn n(&self) -> usize {
        self.outer_degrees.len()
    }

    /// Token with the largest outer degree.
    pub fn top1(&self) -> usize {
        self.ranking[0]
    }

    /// Sum of the `k` largest degrees.
    pub fn topk_mass(&self, k: usize) -> Result<f64> {
        if k == 0 || k > self.n() {
            return Err(Error::InvalidArgument(format!(
                "k = {k} outside 1..={}",
                self.n()
            )));
        }
        Ok(self.ranking[..k].iter().map(|&i| self.outer_degrees[i]).sum())
    }

    /// Mean deviation over the `k` highest-degree tokens (`k` clamped to n).
    pub fn topk_mean_deviation(&self, k: usize) -> f64 {
        let k = k.clamp(1, self.n());
        self.ranking[..k].iter().map(|&i| self.deviations[i]).sum::<f64>() / k as f64
    }

    pub fn top1_deviation(&self) -> f64 {
        self.deviations[self.top1()]
    }
}

/// `d_i = Σ_k a_ki / n` for every column.
///
/// Evaluated as a mean shifted by the first entry, so a constant column
/// yields its value exactly and its deviations vanish exactly.
pub fn outer_degrees(a: &AttentionMatrix) -> Vec<f64> {
    let m = a.matrix();
    let n = m.rows();
    if n == 0 {
        return Vec::new();
    }
    (0..n)
        .map(|j| {
            let base = m[(0, j)];
            base + (0..n).map(|k| m[(k, j)] - base).sum::<f64>() / n as f64
        })
        .collect()
}

/// `Δ_i = sqrt(Σ_k (a_ki − d_i)²) / (n d_i)`, with `Δ_i = 0` when `d_i = 0`.
pub fn attention_deviations(a: &AttentionMatrix) -> Vec<f64> {
    let m = a.matrix();
    let n = a.n();
    let d = outer_degrees(a);
    (0..n)
        .map(|i| {
            if d[i] == 0.0 {
                return 0.0;
            }
            let ss: f64 = (0..n).map(|k| (m[(k, i)] - d[i]).powi(2)).sum();
            ss.sqrt() / (n as f64 * d[i])
        })
        .collect()
}

pub fn topk_degree_mass(a: &AttentionMatrix, k: usize) -> Result<f64> {
    SinkStats::from_attention(a).topk_mass(k)
}

/// Per-layer stats with degrees and deviations computed per head and then
/// averaged over heads.
pub fn head_layer_average(trace: &AttentionTrace) -> Result<Vec<SinkStats>> {
    trace
        .attentions
        .iter()
        .enumerate()
        .map(|(l, heads)| {
            let first = heads
                .first()
                .ok_or_else(|| Error::InvalidArgument(format!("layer {l} has no heads")))?;
            let n = first.n();
            let mut deg = vec![0.0; n];
            let mut dev = vec![0.0; n];
            for (h, a) in heads.iter().enumerate() {
                if a.n() != n {
                    return Err(Error::InvalidArgument(format!(
                        "layer {l} head {h}: n = {} but head 0 has n = {n}",
                        a.n()
                    )));
                }
                for (acc, v) in deg.iter_mut().zip(outer_degrees(a)) {
                    *acc += v;
                }
                for (acc, v) in dev.iter_mut().zip(attention_deviations(a)) {
                    *acc += v;
                }
            }
            let hc = heads.len() as f64;
            deg.iter_mut().for_each(|v| *v /= hc);
            dev.iter_mut().for_each(|v| *v /= hc);
            Ok(SinkStats::from_parts(deg, dev))
        })
        .collect()
}

/// Fraction of stats entries whose top-1 token is a common position.
pub fn common_token_ratio(stats: &[SinkStats], common_positions: &[usize]) -> f64 {
    if stats.is_empty() {
        return 0.0;
    }
    let hits = stats
        .iter()
        .filter(|s| common_positions.contains(&s.top1()))
        .count();
    hits as f64 / stats.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSimilarity {
    /// Mean of `cos(h_i, h_j)` over unordered pairs `i < j` of nonzero rows.
    pub mean: f64,
    pub zero_rows_excluded: usize,
}

/// Mean pairwise cosine similarity of token representations.
pub fn oversmoothing_similarity(h: &Matrix) -> Result<CosineSimilarity> {
    let rows: Vec<(&[f64], f64)> = (0..h.rows())
        .map(|i| (h.row(i), crate::numeric::matrix::norm(h.row(i))))
        .collect();
    let nonzero: Vec<_> = rows.iter().filter(|(_, n)| *n > 0.0).collect();
    let zero_rows_excluded = rows.len() - nonzero.len();
    if nonzero.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 nonzero rows, got {}",
            nonzero.len()
        )));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..nonzero.len() {
        for j in (i + 1)..nonzero.len() {
            let (a, na) = nonzero[i];
            let (b, nb) = nonzero[j];
            let c = crate::numeric::matrix::dot(a, b) / (na * nb);
            total += c.clamp(-1.0, 1.0);
            pairs += 1;
        }
    }
    Ok(CosineSimilarity {
        mean: total / pairs as f64,
        zero_rows_excluded,
    })
}

/// `(I − eeᵀ)H`: every row minus the column mean.
pub fn center_rows(h: &Matrix) -> Matrix {
    let means = h.col_means();
    Matrix::from_fn(h.rows(), h.cols(), |i, j| h[(i, j)] - means[j])
}

/// `d_M(H) = ‖(I − eeᵀ)H‖_F`.
pub fn subspace_distance(h: &Matrix) -> f64 {
    center_rows(h).frobenius_norm()
}

/// `P = Aᵀ(I − eeᵀ)A`, formed as `CᵀC` with `C = (I − eeᵀ)A` so it is exactly
/// symmetric.
pub fn smoothing_operator(a: &AttentionMatrix) -> Matrix {
    let c = center_rows(a.matrix());
    c.t_matmul(&c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenBoundReport {
    pub lambda_max: f64,
    /// `max_i Σ_k (a_ki − d_i)²`.
    pub bound_rhs: f64,
    /// `max_i d_i² Σ_k ((a_ki − d_i)/d_i)²` over tokens with `d_i > 0`.
    pub factored_rhs: f64,
    pub argmax_token: usize,
    pub eigen_iterations: usize,
    pub eigen_converged: bool,
}

/// Computes `λ_max(P)` and the column-deviation lower bound, failing with
/// [`Error::Invariant`] if the bound or its factored form does not hold.
pub fn eigen_bound_check(a: &AttentionMatrix) -> Result<EigenBoundReport> {
    let eig = dominant_eigenvalue(&smoothing_operator(a))?;
    let m = a.matrix();
    let n = a.n();
    let d = outer_degrees(a);
    let mut bound_rhs = 0.0;
    let mut factored_rhs: f64 = 0.0;
    let mut argmax_token = 0;
    for i in 0..n {
        let ss: f64 = (0..n).map(|k| (m[(k, i)] - d[i]).powi(2)).sum();
        if ss > bound_rhs {
            bound_rhs = ss;
            argmax_token = i;
        }
        if d[i] > 0.0 {
            let per_degree: f64 = (0..n).map(|k| ((m[(k, i)] - d[i]) / d[i]).powi(2)).sum();
            factored_rhs = factored_rhs.max(d[i] * d[i] * per_degree);
        }
    }
    let report = EigenBoundReport {
        lambda_max: eig.value,
        bound_rhs,
        factored_rhs,
        argmax_token,
        eigen_iterations: eig.iterations,
        eigen_converged: eig.converged,
    };
    if report.lambda_max < report.bound_rhs - BOUND_SLACK {
        return Err(Error::Invariant(format!(
            "lambda_max {} below bound {}",
            report.lambda_max, report.bound_rhs
        )));
    }
    if (report.factored_rhs - report.bound_rhs).abs() > BOUND_SLACK {
        return Err(Error::Invariant(format!(
            "factored bound {} differs from {}",
            report.factored_rhs, report.bound_rhs
        )));
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    /// `d_M(AH)`.
    pub lhs: f64,
    /// `sqrt(λ_max) · d_M(H)`.
    pub rhs: f64,
    pub lambda_max: f64,
    /// `rhs − lhs`; non-negative up to [`BOUND_SLACK`] when the inequality holds.
    pub slack: f64,
    pub holds: bool,
}

/// Both sides of `d_M(AH) ≤ sqrt(λ_max) d_M(H)`.
pub fn contraction_check(a: &AttentionMatrix, h: &Matrix) -> Result<ContractionReport> {
    if h.rows() != a.n() {
        return Err(Error::Shape {
            op: "contraction_check",
            left: a.matrix().shape(),
            right: h.shape(),
        });
    }
    let lambda_max = dominant_eigenvalue(&smoothing_operator(a))?.value.max(0.0);
    let lhs = subspace_distance(&a.matrix().matmul(h));
    let rhs = lambda_max.sqrt() * subspace_distance(h);
    Ok(ContractionReport {
        lhs,
        rhs,
        lambda_max,
        slack: rhs - lhs,
        holds: lhs <= rhs + BOUND_SLACK,
    })
}

/// One row of the per-layer analysis table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub layer: usize,
    pub head_count: usize,
    pub top1_degree: f64,
    pub top3_degree: f64,
    pub top5_degree: f64,
    pub top1_deviation: f64,
    pub cosine_similarity: Option<f64>,
    pub lambda_max: f64,
    pub bound_rhs: f64,
}

/// Per-layer summary of a trace. Degrees and deviations are head averages;
/// the eigenvalue bound is evaluated on the head-averaged attention map and
/// top-k masses clamp `k` to the token count.
pub fn layer_rows(trace: &AttentionTrace) -> Result<Vec<LayerRow>> {
    let stats = head_layer_average(trace)?;
    let mut rows = Vec::with_capacity(stats.len());
    for (l, s) in stats.iter().enumerate() {
        let n = s.n();
        let avg = AttentionMatrix::mean_of(&trace.attentions[l])?;
        let bound = eigen_bound_check(&avg)?;
        let cosine_similarity = match trace.hidden_states.get(l) {
            Some(h) => oversmoothing_similarity(h).ok().map(|c| c.mean),
            None => None,
        };
        rows.push(LayerRow {
            layer: l,
            head_count: trace.attentions[l].len(),
            top1_degree: s.topk_mass(1)?,
            top3_degree: s.topk_mass(3.min(n))?,
            top5_degree: s.topk_mass(5.min(n))?,
            top1_deviation: s.top1_deviation(),
            cosine_similarity,
            lambda_max: bound.lambda_max,
            bound_rhs: bound.bound_rhs,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_degrees_and_deviations() {
        let a = AttentionMatrix::uniform(4);
        assert_eq!(outer_degrees(&a), vec![0.25; 4]);
        assert_eq!(attention_deviations(&a), vec![0.0; 4]);
        let a10 = AttentionMatrix::uniform(10);
        assert!((topk_degree_mass(&a10, 3).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn pure_sink_degrees_and_deviations() {
        let a = AttentionMatrix::pure_sink(5, 0);
        assert_eq!(outer_degrees(&a), vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(attention_deviations(&a)[0], 0.0);
        assert_eq!(topk_degree_mass(&a, 1).unwrap(), 1.0);
    }

    #[test]
    fn identity_deviation() {
        let a = AttentionMatrix::identity(4);
        assert_eq!(outer_degrees(&a), vec![0.25; 4]);
        for dv in attention_deviations(&a) {
            assert!((dv - 0.75f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn topk_range_is_checked() {
        let a = AttentionMatrix::uniform(3);
        assert!(topk_degree_mass(&a, 0).is_err());
        assert!(topk_degree_mass(&a, 4).is_err());
    }

    #[test]
    fn ties_rank_lower_index_first() {
        let s = SinkStats::from_attention(&AttentionMatrix::uniform(4));
        assert_eq!(s.ranking, vec![0, 1, 2, 3]);
    }

    #[test]
    fn non_stochastic_row_is_named() {
        let m = Matrix::from_rows(&[vec![0.5, 0.5], vec![0.2, 0.2]]).unwrap();
        match AttentionMatrix::new(m) {
            Err(Error::NotStochastic { row, .. }) => assert_eq!(row, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cosine_examples() {
        let same = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert!((oversmoothing_similarity(&same).unwrap().mean - 1.0).abs() < 1e-12);
        let orth = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 3.0]]).unwrap();
        assert_eq!(oversmoothing_similarity(&orth).unwrap().mean, 0.0);
        let deg60 = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.75f64.sqrt()]]).unwrap();
        assert!((oversmoothing_similarity(&deg60).unwrap().mean - 0.5).abs() < 1e-12);
        let with_zero = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(oversmoothing_similarity(&with_zero).is_err());
    }

    #[test]
    fn subspace_distance_examples() {
        let same = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(subspace_distance(&same), 0.0);
        let centered = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        assert!((subspace_distance(&centered) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn eigen_bound_examples() {
        let r = eigen_bound_check(&AttentionMatrix::uniform(5)).unwrap();
        assert!(r.lambda_max.abs() < 1e-15);
        assert!(r.bound_rhs.abs() < 1e-15);
        let r = eigen_bound_check(&AttentionMatrix::identity(4)).unwrap();
        assert!((r.lambda_max - 1.0).abs() < 1e-9);
        assert!((r.bound_rhs - 0.75).abs() < 1e-12);
    }

    #[test]
    fn contraction_examples() {
        let h = Matrix::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.0, 1.0]]).unwrap();
        let r = contraction_check(&AttentionMatrix::uniform(3), &h).unwrap();
        assert!(r.lhs.abs() < 1e-15 && r.holds);
        let r = contraction_check(&AttentionMatrix::identity(3), &h).unwrap();
        assert!((r.lhs - r.rhs).abs() < 1e-9 && r.holds);
    }

    #[test]
    fn common_ratio_examples() {
        let s = SinkStats::from_attention(&AttentionMatrix::pure_sink(4, 0));
        assert_eq!(common_token_ratio(&[s.clone(), s.clone()], &[0, 1]), 1.0);
        assert_eq!(common_token_ratio(&[s], &[]), 0.0);
    }
}
