//! Two-attention-layer regression model `ŷ = bᵀ(A X W)v` used to show how
//! attention sinks on shared tokens carry gradient interference between two
//! otherwise orthogonal tasks.
//!
//! With `Bᵀ = bᵀ A X`, the gradient of `½(ŷ − y)²` with respect to the shared
//! `W` is `(ŷ − y) B vᵀ`, so the interference between two tasks is
//! `(ŷ₁ − y₁)(ŷ₂ − y₂)(B₁ᵀB₂)(v₁ᵀv₂)`. The representation splits into a
//! non-common part `r`, a degree-weighted common part `s` and a deviation
//! part `δ`; for orthogonal tasks only `s` and `δ` can correlate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{outer_degrees, AttentionMatrix};
use crate::numeric::matrix::{dot, row_softmax, softmax_in_place};
use crate::numeric::{Matrix, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AttentionSource {
    /// `A` and `b` given explicitly.
    Direct { a: AttentionMatrix, b: Vec<f64> },
    /// `A = softmax(X Q (X K)ᵀ / √d)`, `b = softmax(X r / √d)`.
    Derived {
        query: Matrix,
        key: Matrix,
        readout: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseStudyTask {
    /// `n×d` token embeddings; rows `0..common_count` are the common tokens.
    pub x: Matrix,
    pub y: f64,
    pub common_count: usize,
    pub attention: AttentionSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharedParams {
    pub w: Matrix,
    pub v1: Vec<f64>,
    pub v2: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskId {
    First,
    Second,
}

impl SharedParams {
    pub fn predictor(&self, which: TaskId) -> &[f64] {
        match which {
            TaskId::First => &self.v1,
            TaskId::Second => &self.v2,
        }
    }

    pub fn dim(&self) -> usize {
        self.w.rows()
    }
}

impl CaseStudyTask {
    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// Checks shapes, `k ≤ n`, and that `b` is a probability vector.
    pub fn validate(&self) -> Result<()> {
        let (n, d) = self.x.shape();
        if self.common_count > n {
            return Err(Error::InvalidArgument(format!(
                "common_count {} exceeds n = {n}",
                self.common_count
            )));
        }
        match &self.attention {
            AttentionSource::Direct { a, b } => {
                if a.n() != n || b.len() != n {
                    return Err(Error::Shape {
                        op: "case-study attention",
                        left: (n, n),
                        right: (a.n(), b.len()),
                    });
                }
                if b.iter().any(|v| *v < 0.0) || (b.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidArgument(
                        "b must be nonnegative and sum to 1".into(),
                    ));
                }
            }
            AttentionSource::Derived {
                query,
                key,
                readout,
            } => {
                if query.shape() != (d, d) || key.shape() != (d, d) || readout.len() != d {
                    return Err(Error::Shape {
                        op: "case-study derived attention",
                        left: (d, d),
                        right: query.shape(),
                    });
                }
            }
        }
        Ok(())
    }

    /// The first-layer attention matrix and second-layer attention vector.
    pub fn attention(&self) -> Result<(AttentionMatrix, Vec<f64>)> {
        match &self.attention {
            AttentionSource::Direct { a, b } => Ok((a.clone(), b.clone())),
            AttentionSource::Derived {
                query,
                key,
                readout,
            } => {
                let scale = 1.0 / (self.dim() as f64).sqrt();
                let q = self.x.matmul(query);
                let k = self.x.matmul(key);
                let a = AttentionMatrix::new(row_softmax(&q.matmul_t(&k).scale(scale)))?;
                let mut b: Vec<f64> = self.x.mul_vec(readout).iter().map(|v| v * scale).collect();
                softmax_in_place(&mut b);
                Ok((a, b))
            }
        }
    }

    /// `Bᵀ = bᵀ A X`, a length-d vector.
    pub fn representation(&self) -> Result<Vec<f64>> {
        let (a, b) = self.attention()?;
        Ok(Matrix::row_vector(&b).matmul(a.matrix()).matmul(&self.x).into_data())
    }
}

fn check_params(task: &CaseStudyTask, params: &SharedParams) -> Result<()> {
    task.validate()?;
    let d = task.dim();
    if params.w.shape() != (d, d) || params.v1.len() != d || params.v2.len() != d {
        return Err(Error::Shape {
            op: "case-study params",
            left: (d, d),
            right: params.w.shape(),
        });
    }
    Ok(())
}

/// `ŷ = bᵀ(A X W)v` with the predictor of `which`.
pub fn predict(task: &CaseStudyTask, params: &SharedParams, which: TaskId) -> Result<f64> {
    check_params(task, params)?;
    let rep = Matrix::row_vector(&task.representation()?);
    let out = rep.matmul(&params.w);
    Ok(dot(out.row(0), params.predictor(which)))
}

/// `½(ŷ − y)²`.
pub fn loss(y_hat: f64, y: f64) -> f64 {
    0.5 * (y_hat - y).powi(2)
}

/// Interference on `W` from the closed form
/// `(ŷ₁ − y₁)(ŷ₂ − y₂)(B₁ᵀB₂)(v₁ᵀv₂)`.
pub fn interference_closed_form(
    t1: &CaseStudyTask,
    t2: &CaseStudyTask,
    params: &SharedParams,
) -> Result<f64> {
    let r1 = predict(t1, params, TaskId::First)? - t1.y;
    let r2 = predict(t2, params, TaskId::Second)? - t2.y;
    let b1 = t1.representation()?;
    let b2 = t2.representation()?;
    Ok(r1 * r2 * dot(&b1, &b2) * dot(&params.v1, &params.v2))
}

/// `∇_W L` for one task, built on its own tape.
pub fn loss_gradient_w(task: &CaseStudyTask, params: &SharedParams, which: TaskId) -> Result<Matrix> {
    check_params(task, params)?;
    let (a, b) = task.attention()?;
    let mut tape = Tape::new();
    let b = tape.constant(Matrix::row_vector(&b));
    let a = tape.constant(a.matrix().clone());
    let x = tape.constant(task.x.clone());
    let w = tape.var(params.w.clone());
    let v = tape.constant(Matrix::col_vector(params.predictor(which)));
    let y = tape.constant(Matrix::scalar(task.y));

    let ba = tape.matmul(b, a);
    let bax = tape.matmul(ba, x);
    let baxw = tape.matmul(bax, w);
    let y_hat = tape.matmul(baxw, v);
    let residual = tape.sub(y_hat, y);
    let sq = tape.hadamard(residual, residual);
    let loss = tape.scale(sq, 0.5);
    let grads = tape.backward(loss)?;
    Ok(grads.get(w).clone())
}

/// Interference on `W` as the flattened dot product of the two tasks'
/// autodiff gradients.
pub fn interference_autodiff(
    t1: &CaseStudyTask,
    t2: &CaseStudyTask,
    params: &SharedParams,
) -> Result<f64> {
    let g1 = loss_gradient_w(t1, params, TaskId::First)?;
    let g2 = loss_gradient_w(t2, params, TaskId::Second)?;
    Ok(g1.frobenius_dot(&g2))
}

/// `Bᵀ = r + s + δ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    /// Attention-weighted non-common rows.
    pub r: Vec<f64>,
    /// Degree-weighted common rows.
    pub s: Vec<f64>,
    /// Common rows weighted by `b_i (a_ij − d_j)`.
    pub delta: Vec<f64>,
}

impl Decomposition {
    pub fn reconstruct(&self) -> Vec<f64> {
        self.r
            .iter()
            .zip(&self.s)
            .zip(&self.delta)
            .map(|((r, s), d)| r + s + d)
            .collect()
    }
}

pub fn decompose_representation(task: &CaseStudyTask) -> Result<Decomposition> {
    task.validate()?;
    let (a, b) = task.attention()?;
    let (n, dim) = task.x.shape();
    let k = task.common_count;
    let m = a.matrix();
    let deg = outer_degrees(&a);

    // Column weights: w_j = Σ_i b_i a_ij for non-common j, Σ_i b_i ε_ij for common j.
    let mut r = vec![0.0; dim];
    let mut s = vec![0.0; dim];
    let mut delta = vec![0.0; dim];
    for j in 0..n {
        let row = task.x.row(j);
        if j < k {
            let eps_weight: f64 = (0..n).map(|i| b[i] * (m[(i, j)] - deg[j])).sum();
            for c in 0..dim {
                s[c] += deg[j] * row[c];
                delta[c] += eps_weight * row[c];
            }
        } else {
            let weight: f64 = (0..n).map(|i| b[i] * m[(i, j)]).sum();
            for c in 0..dim {
                r[c] += weight * row[c];
            }
        }
    }
    Ok(Decomposition { r, s, delta })
}

/// Parameters of the orthogonal task-pair generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairConfig {
    pub n1: usize,
    pub n2: usize,
    pub dim: usize,
    pub common_count: usize,
    /// Outer degree of each common token.
    pub sink_degree: f64,
    /// Column-deviation amplitude on common tokens, as a fraction in `[0, 1]`
    /// of the largest amplitude that keeps every row stochastic.
    pub deviation_scale: f64,
    /// Magnitude of task-block components mixed into the common embeddings
    /// (0 keeps them exactly orthogonal to every task block).
    pub contamination: f64,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            n1: 8,
            n2: 8,
            dim: 16,
            common_count: 1,
            sink_degree: 0.5,
            deviation_scale: 0.0,
            contamination: 0.0,
        }
    }
}

impl PairConfig {
    fn validate(&self) -> Result<()> {
        let k = self.common_count;
        if self.n1 <= k || self.n2 <= k {
            return Err(Error::InvalidArgument(
                "each task needs at least one non-common token".into(),
            ));
        }
        if self.dim < k + 2 {
            return Err(Error::InvalidArgument(format!(
                "dim must be at least {} (common directions plus one per task)",
                k + 2
            )));
        }
        if !(0.0..=1.0).contains(&self.deviation_scale) {
            return Err(Error::InvalidArgument("deviation_scale must be in [0, 1]".into()));
        }
        if self.sink_degree < 0.0 || k as f64 * self.sink_degree > 1.0 + 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "sink_degree {} infeasible for {k} common tokens",
                self.sink_degree
            )));
        }
        Ok(())
    }

    fn block_dim(&self) -> usize {
        (self.dim - self.common_count) / 2
    }
}

/// A generated pair of tasks and the shared parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskPair {
    pub first: CaseStudyTask,
    pub second: CaseStudyTask,
    pub params: SharedParams,
}

/// Builds two orthogonal tasks that share `k` common tokens.
///
/// Embedding coordinates are split into a common block and one private block
/// per task, so non-common rows of different tasks, and common rows versus
/// either task block, have exactly zero dot products. Common columns of `A`
/// get mean `sink_degree` with a zero-mean deviation pattern; the remaining
/// row mass goes to the task's own tokens. Targets sit at a standard-normal
/// residual from the prediction, so the sweep isolates `B₁ᵀB₂`.
///
/// The number of random draws does not depend on degree or deviation, so a
/// fixed seed gives common random numbers across a sweep grid.
pub fn generate_pair(cfg: &PairConfig, seed: u64) -> Result<TaskPair> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = cfg.common_count;
    let block = cfg.block_dim();

    let common = Matrix::random_normal(k, k, 1.0, &mut rng);
    let contamination = Matrix::random_normal(k, 2 * block, 1.0, &mut rng);

    let make_task = |n: usize, block_index: usize, rng: &mut ChaCha8Rng| -> Result<(Matrix, AttentionMatrix, Vec<f64>)> {
        let offset = k + block_index * block;
        let own = Matrix::random_normal(n - k, block, 1.0, rng);
        let x = Matrix::from_fn(n, cfg.dim, |i, c| {
            if i < k {
                if c < k {
                    common[(i, c)]
                } else if c < k + 2 * block {
                    cfg.contamination * contamination[(i, c - k)]
                } else {
                    0.0
                }
            } else if (offset..offset + block).contains(&c) {
                own[(i - k, c - offset)]
            } else {
                0.0
            }
        });

        let z: Vec<f64> = (0..n * k).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let rest: Vec<f64> = (0..n * (n - k)).map(|_| Exp1.sample(rng)).collect();
        let b_raw: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();

        let amplitude = if k == 0 {
            0.0
        } else {
            cfg.deviation_scale * cfg.sink_degree.min((1.0 - k as f64 * cfg.sink_degree) / k as f64)
        };
        let mut a = Matrix::zeros(n, n);
        for j in 0..k {
            let col: Vec<f64> = (0..n).map(|i| z[i * k + j]).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let centered: Vec<f64> = col.iter().map(|v| v - mean).collect();
            let peak = centered.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for i in 0..n {
                let unit = if peak > 0.0 { centered[i] / peak } else { 0.0 };
                a[(i, j)] = cfg.sink_degree + amplitude * unit;
            }
        }
        for i in 0..n {
            let used: f64 = (0..k).map(|j| a[(i, j)]).sum();
            let remaining = (1.0 - used).max(0.0);
            let w = &rest[i * (n - k)..(i + 1) * (n - k)];
            let total: f64 = w.iter().sum();
            for (jj, wj) in w.iter().enumerate() {
                a[(i, k + jj)] = remaining * wj / total;
            }
        }
        let b_total: f64 = b_raw.iter().sum();
        let b = b_raw.iter().map(|v| v / b_total).collect();
        Ok((x, AttentionMatrix::new(a)?, b))
    };

    let (x1, a1, b1) = make_task(cfg.n1, 0, &mut rng)?;
    let (x2, a2, b2) = make_task(cfg.n2, 1, &mut rng)?;

    let w = Matrix::random_normal(cfg.dim, cfg.dim, 1.0 / (cfg.dim as f64).sqrt(), &mut rng);
    let v1 = Matrix::random_normal(cfg.dim, 1, 1.0, &mut rng).into_data();
    let v2 = Matrix::random_normal(cfg.dim, 1, 1.0, &mut rng).into_data();
    let res1: f64 = StandardNormal.sample(&mut rng);
    let res2: f64 = StandardNormal.sample(&mut rng);

    let mut first = CaseStudyTask {
        x: x1,
        y: 0.0,
        common_count: k,
        attention: AttentionSource::Direct { a: a1, b: b1 },
    };
    let mut second = CaseStudyTask {
        x: x2,
        y: 0.0,
        common_count: k,
        attention: AttentionSource::Direct { a: a2, b: b2 },
    };
    let params = SharedParams { w, v1, v2 };
    first.y = predict(&first, &params, TaskId::First)? - res1;
    second.y = predict(&second, &params, TaskId::Second)? - res2;
    Ok(TaskPair {
        first,
        second,
        params,
    })
}

/// One (grid point, seed) measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sink_degree: f64,
    pub deviation_scale: f64,
    pub seed: u64,
    pub interference: f64,
    pub s1s2: f64,
    pub r1r2: f64,
    /// `B₁ᵀB₂ − (s₁+δ₁)ᵀ(s₂+δ₂) − r₁ᵀr₂`.
    pub cross_terms: f64,
}

/// Seed-averaged magnitudes at one grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub sink_degree: f64,
    pub deviation_scale: f64,
    pub seeds: usize,
    pub mean_abs_interference: f64,
    pub mean_abs_s1s2: f64,
    pub mean_abs_r1r2: f64,
    pub mean_abs_cross_terms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub degree_grid: Vec<f64>,
    pub deviation_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub pair: PairConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            degree_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            deviation_grid: vec![0.0, 0.5, 1.0],
            seeds: (0..20).collect(),
            pair: PairConfig::default(),
        }
    }
}

/// Interference and representation correlations over a degree × deviation
/// grid. Rows are ordered by degree, then deviation, then seed.
pub fn interference_sweep(cfg: &SweepConfig) -> Result<(Vec<SweepRow>, Vec<SweepSummary>)> {
    if cfg.degree_grid.is_empty() || cfg.deviation_grid.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::InvalidArgument("sweep grids must be nonempty".into()));
    }
    let mut points = Vec::new();
    for &deg in &cfg.degree_grid {
        for &dev in &cfg.deviation_grid {
            for &seed in &cfg.seeds {
                points.push((deg, dev, seed));
            }
        }
    }
    let rows: Vec<SweepRow> = points
        .par_iter()
        .map(|&(deg, dev, seed)| {
            let pair_cfg = PairConfig {
                sink_degree: deg,
                deviation_scale: dev,
                ..cfg.pair.clone()
            };
            let pair = generate_pair(&pair_cfg, seed)?;
            let d1 = decompose_representation(&pair.first)?;
            let d2 = decompose_representation(&pair.second)?;
            let b1 = d1.reconstruct();
            let b2 = d2.reconstruct();
            let sd1: Vec<f64> = d1.s.iter().zip(&d1.delta).map(|(a, b)| a + b).collect();
            let sd2: Vec<f64> = d2.s.iter().zip(&d2.delta).map(|(a, b)| a + b).collect();
            let r1r2 = dot(&d1.r, &d2.r);
            Ok(SweepRow {
                sink_degree: deg,
                deviation_scale: dev,
                seed,
                interference: interference_closed_form(&pair.first, &pair.second, &pair.params)?,
                s1s2: dot(&d1.s, &d2.s),
                r1r2,
                cross_terms: dot(&b1, &b2) - dot(&sd1, &sd2) - r1r2,
            })
        })
        .collect::<Result<_>>()?;

    let per_point = cfg.seeds.len();
    let summaries = rows
        .chunks(per_point)
        .map(|chunk| {
            let m = |f: fn(&SweepRow) -> f64| chunk.iter().map(|r| f(r).abs()).sum::<f64>() / chunk.len() as f64;
            SweepSummary {
                sink_degree: chunk[0].sink_degree,
                deviation_scale: chunk[0].deviation_scale,
                seeds: chunk.len(),
                mean_abs_interference: m(|r| r.interference),
                mean_abs_s1s2: m(|r| r.s1s2),
                mean_abs_r1r2: m(|r| r.r1r2),
                mean_abs_cross_terms: m(|r| r.cross_terms),
            }
        })
        .collect();
    Ok((rows, summaries))
}

/// Histogram with `bins` equal-width buckets over `[edges[0], edges[bins]]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn from_values(values: &[f64], bins: usize) -> Self {
        let bins = bins.max(1);
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if !lo.is_finite() {
            (-0.5, 0.5)
        } else if hi - lo <= f64::EPSILON * lo.abs().max(1.0) {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        };
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0; bins];
        for v in values {
            let idx = (((v - lo) / width) as usize).min(bins - 1);
            counts[idx] += 1;
        }
        Self { edges, counts }
    }
}

/// Dot products of one token's embedding against every other row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenCorrelations {
    pub id: usize,
    pub mean: f64,
    pub std: f64,
    pub self_correlation: f64,
    pub histogram: Histogram,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingCorrelations {
    pub tokens: Vec<TokenCorrelations>,
    /// Squared norm of every embedding row.
    pub self_correlations: Vec<f64>,
}

/// Cross-correlation distributions for the selected rows plus the
/// self-correlation of every row.
pub fn embedding_correlations(e: &Matrix, ids: &[usize], bins: usize) -> Result<EmbeddingCorrelations> {
    if e.rows() < 2 {
        return Err(Error::InvalidArgument("need at least two embedding rows".into()));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= e.rows()) {
        return Err(Error::InvalidArgument(format!(
            "token id {bad} out of range for {} rows",
            e.rows()
        )));
    }
    let self_correlations: Vec<f64> = (0..e.rows()).map(|i| dot(e.row(i), e.row(i))).collect();
    let tokens = ids
        .iter()
        .map(|&id| {
            let values: Vec<f64> = (0..e.rows())
                .filter(|&j| j != id)
                .map(|j| dot(e.row(id), e.row(j)))
                .collect();
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
            TokenCorrelations {
                id,
                mean,
                std: var.sqrt(),
                self_correlation: self_correlations[id],
                histogram: Histogram::from_values(&values, bins),
                values,
            }
        })
        .collect();
    Ok(EmbeddingCorrelations {
        tokens,
        self_correlations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_token_task(x: &[f64]) -> CaseStudyTask {
        CaseStudyTask {
            x: Matrix::row_vector(x),
            y: 0.0,
            common_count: 0,
            attention: AttentionSource::Direct {
                a: AttentionMatrix::identity(1),
                b: vec![1.0],
            },
        }
    }

    #[test]
    fn single_token_prediction_is_a_dot_product() {
        let t = single_token_task(&[1.0, 2.0]);
        let p = SharedParams {
            w: Matrix::identity(2),
            v1: vec![3.0, -1.0],
            v2: vec![0.0, 0.0],
        };
        assert_eq!(predict(&t, &p, TaskId::First).unwrap(), 1.0);
        let zero = SharedParams {
            w: Matrix::zeros(2, 2),
            ..p
        };
        assert_eq!(predict(&t, &zero, TaskId::First).unwrap(), 0.0);
    }

    #[test]
    fn loss_examples() {
        assert_eq!(loss(1.5, 1.5), 0.0);
        assert_eq!(loss(3.0, 1.0), 2.0);
    }

    #[test]
    fn orthogonal_predictors_give_zero_interference() {
        let pair = generate_pair(&PairConfig::default(), 3).unwrap();
        let mut params = pair.params.clone();
        params.v1 = vec![0.0; params.dim()];
        params.v1[0] = 1.0;
        params.v2 = vec![0.0; params.dim()];
        params.v2[1] = 1.0;
        assert_eq!(
            interference_closed_form(&pair.first, &pair.second, &params).unwrap(),
            0.0
        );
    }

    #[test]
    fn decomposition_k0_has_no_sink_terms() {
        let cfg = PairConfig {
            common_count: 0,
            sink_degree: 0.0,
            ..PairConfig::default()
        };
        let pair = generate_pair(&cfg, 1).unwrap();
        let d = decompose_representation(&pair.first).unwrap();
        assert!(d.s.iter().all(|v| *v == 0.0));
        assert!(d.delta.iter().all(|v| *v == 0.0));
        assert_eq!(d.r, pair.first.representation().unwrap());
    }

    #[test]
    fn decomposition_rejects_large_k() {
        let mut t = single_token_task(&[1.0]);
        t.common_count = 2;
        assert!(decompose_representation(&t).is_err());
    }

    #[test]
    fn histogram_of_constant_values() {
        let h = Histogram::from_values(&[0.0, 0.0, 0.0], 4);
        assert_eq!(h.counts.iter().sum::<usize>(), 3);
    }

    #[test]
    fn orthonormal_embeddings_have_zero_cross_correlation() {
        let e = Matrix::identity(5);
        let c = embedding_correlations(&e, &[0, 3], 8).unwrap();
        assert!(c.self_correlations.iter().all(|v| *v == 1.0));
        for t in &c.tokens {
            assert!(t.values.iter().all(|v| *v == 0.0));
            assert_eq!(t.mean, 0.0);
        }
    }

    #[test]
    fn duplicated_row_correlates_at_its_squared_norm() {
        let e = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        let c = embedding_correlations(&e, &[0], 4).unwrap();
        assert_eq!(c.tokens[0].values[0], 5.0);
        assert_eq!(c.tokens[0].self_correlation, 5.0);
    }

    #[test]
    fn empty_grid_is_rejected() {
        let cfg = SweepConfig {
            degree_grid: vec![],
            ..SweepConfig::default()
        };
        assert!(interference_sweep(&cfg).is_err());
    }
}
