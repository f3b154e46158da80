//! Randomized self-check suites behind the `verify` command: the eigenvalue
//! bound and contraction inequality against a dense eigensolver, gradient
//! checks of every model, and the two exact equivalences (closed-form
//! interference and one-hot CLS attention).

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::case_study::{
    decompose_representation, interference_autodiff, interference_closed_form, AttentionSource, CaseStudyTask,
    SharedParams,
};
use crate::encoder::{EncoderConfig, ForwardOptions, TransformerEncoder};
use crate::error::Result;
use crate::metrics::{contraction_check, eigen_bound_check, AttentionMatrix, BOUND_SLACK};
use crate::numeric::matrix::{norm, row_softmax};
use crate::numeric::{check_gradients, Matrix, ParamStore, Tape};
use crate::prescale::{cls_onehot_equivalence, ClassHead, HeadVariant};
use crate::rng;

pub const EIGEN_ORACLE_TOLERANCE: f64 = 1e-8;
pub const GRADIENT_STEP: f64 = 1e-5;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const INTERFERENCE_TOLERANCE: f64 = 1e-8;
pub const RECONSTRUCTION_TOLERANCE: f64 = 1e-10;
pub const ONEHOT_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub seed: u64,
    /// Cases for the eigenvalue-bound and contraction suites.
    pub matrix_cases: usize,
    /// Cases for interference, decomposition and one-hot CLS.
    pub equivalence_cases: usize,
    /// Random models per gradient-checked architecture.
    pub gradient_cases: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            matrix_cases: 1000,
            equivalence_cases: 100,
            gradient_cases: 3,
        }
    }
}

/// Outcome of one suite. `worst` is the largest observed error (or, for the
/// inequality suites, the largest violation; negative means every case held
/// with room to spare).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub cases: usize,
    pub passed: usize,
    pub worst: f64,
    pub tolerance: f64,
    pub failures: Vec<String>,
}

impl SuiteResult {
    fn new(name: &str, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            cases: 0,
            passed: 0,
            worst: f64::NEG_INFINITY,
            tolerance,
            failures: Vec::new(),
        }
    }

    fn record(&mut self, case: impl std::fmt::Display, error: f64, ok: bool) {
        self.cases += 1;
        self.worst = self.worst.max(error);
        if ok {
            self.passed += 1;
        } else if self.failures.len() < 10 {
            self.failures.push(format!("case {case}: error {error:e}"));
        }
    }

    fn fail(&mut self, case: impl std::fmt::Display, reason: impl std::fmt::Display) {
        self.cases += 1;
        self.worst = f64::INFINITY;
        if self.failures.len() < 10 {
            self.failures.push(format!("case {case}: {reason}"));
        }
    }

    pub fn all_passed(&self) -> bool {
        self.cases > 0 && self.passed == self.cases
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Random row-stochastic matrix mixing regimes: near-uniform, diffuse,
/// near-one-hot rows, and columns boosted into sinks.
pub fn random_attention<R: Rng + ?Sized>(n: usize, rng: &mut R) -> AttentionMatrix {
    let scale = match rng.random_range(0..4) {
        0 => rng.random_range(0.0..0.2),
        1 => rng.random_range(0.2..3.0),
        2 => rng.random_range(3.0..20.0),
        _ => rng.random_range(0.5..2.0),
    };
    let sinks = rng.random_range(0..=n.min(3));
    let boost = rng.random_range(0.0..8.0);
    let logits = Matrix::from_fn(n, n, |_, j| scale * normal(rng) + if j < sinks { boost } else { 0.0 });
    AttentionMatrix::new(row_softmax(&logits)).expect("softmax rows are stochastic")
}

/// Row-stochastic matrix whose first `k` columns are constant at
/// `sixty_fourths / 64` (zero-deviation sinks); the remaining mass is spread
/// randomly. Every entry is a dyadic rational so rows sum to exactly one and
/// validation leaves the constant columns untouched.
pub fn constant_sink_attention<R: Rng + ?Sized>(n: usize, k: usize, sixty_fourths: u32, rng: &mut R) -> AttentionMatrix {
    let degree = f64::from(sixty_fourths) / 64.0;
    assert!(k < n && k as f64 * degree <= 1.0);
    let rest = 1.0 - k as f64 * degree;
    let quantum = 2f64.powi(-20);
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        let mut tail: Vec<f64> = (k..n).map(|_| normal(rng)).collect();
        crate::numeric::matrix::softmax_in_place(&mut tail);
        let row = m.row_mut(i);
        row[..k].fill(degree);
        let mut used = 0.0;
        for (dst, v) in row[k..n - 1].iter_mut().zip(tail) {
            *dst = (rest * v / quantum).floor() * quantum;
            used += *dst;
        }
        row[n - 1] = rest - used;
    }
    AttentionMatrix::new(m).expect("rows sum to one")
}

fn random_vec<R: Rng + ?Sized>(n: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| scale * normal(rng)).collect()
}

fn random_probability<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut b = random_vec(n, 1.5, rng);
    crate::numeric::matrix::softmax_in_place(&mut b);
    b
}

/// Random case-study task and parameters. Even cases use explicit attention
/// with `k` sink columns, odd cases derive attention from query/key weights.
pub fn random_case_study<R: Rng + ?Sized>(case: usize, k: usize, rng: &mut R) -> (CaseStudyTask, CaseStudyTask, SharedParams) {
    let d = rng.random_range(2..=8);
    let task = |rng: &mut R| {
        let n = rng.random_range(k + 1..=k + 7);
        let x = Matrix::random_normal(n, d, 1.0, rng);
        let attention = if case.is_multiple_of(2) {
            let logits = Matrix::from_fn(n, n, |_, j| normal(rng) + if j < k { 3.0 } else { 0.0 });
            AttentionSource::Direct {
                a: AttentionMatrix::new(row_softmax(&logits)).expect("stochastic"),
                b: random_probability(n, rng),
            }
        } else {
            AttentionSource::Derived {
                query: Matrix::random_normal(d, d, 1.0, rng),
                key: Matrix::random_normal(d, d, 1.0, rng),
                readout: random_vec(d, 1.0, rng),
            }
        };
        CaseStudyTask {
            x,
            y: normal(rng),
            common_count: k,
            attention,
        }
    };
    let t1 = task(rng);
    let t2 = task(rng);
    let params = SharedParams {
        w: Matrix::random_normal(d, d, 1.0, rng),
        v1: random_vec(d, 1.0, rng),
        v2: random_vec(d, 1.0, rng),
    };
    (t1, t2, params)
}

fn to_dense(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

/// `λ_max(Aᵀ(I − eeᵀ)A)` from a full symmetric eigendecomposition.
pub fn dense_lambda_max(a: &AttentionMatrix) -> f64 {
    let n = a.n();
    let am = to_dense(a.matrix());
    let centering = DMatrix::<f64>::identity(n, n) - DMatrix::<f64>::from_element(n, n, 1.0 / n as f64);
    let p = am.transpose() * centering * &am;
    let p = (&p + p.transpose()) * 0.5;
    SymmetricEigen::new(p).eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn dense_subspace_distance(h: &DMatrix<f64>) -> f64 {
    let mut c = h.clone();
    for j in 0..c.ncols() {
        let mean = c.column(j).mean();
        c.column_mut(j).add_scalar_mut(-mean);
    }
    c.norm()
}

/// Power-iteration `λ_max` and the column-deviation bound, each against the
/// dense eigensolver.
pub fn eigen_bound_suite(cases: usize, seed: u64) -> SuiteResult {
    let mut rng = rng::stream(seed, "verify.eigen");
    let mut out = SuiteResult::new("eigen_bound", EIGEN_ORACLE_TOLERANCE);
    for case in 0..cases {
        let n = rng.random_range(2..=16);
        let a = random_attention(n, &mut rng);
        match eigen_bound_check(&a) {
            Ok(report) => {
                let oracle = dense_lambda_max(&a);
                let err = (report.lambda_max - oracle).abs();
                let bound_ok = oracle >= report.bound_rhs - BOUND_SLACK;
                out.record(case, err, err <= EIGEN_ORACLE_TOLERANCE && bound_ok);
            }
            Err(e) => out.fail(case, e),
        }
    }
    out
}

/// `d_M(AH) ≤ sqrt(λ_max) d_M(H)`, evaluated by the library and densely.
pub fn contraction_suite(cases: usize, seed: u64) -> SuiteResult {
    let mut rng = rng::stream(seed, "verify.contraction");
    let mut out = SuiteResult::new("contraction", BOUND_SLACK);
    for case in 0..cases {
        let n = rng.random_range(2..=16);
        let d = rng.random_range(1..=8);
        let a = random_attention(n, &mut rng);
        let h = Matrix::random_normal(n, d, rng.random_range(0.1..10.0), &mut rng);
        match contraction_check(&a, &h) {
            Ok(report) => {
                let hd = to_dense(&h);
                let lhs = dense_subspace_distance(&(to_dense(a.matrix()) * &hd));
                let rhs = dense_lambda_max(&a).max(0.0).sqrt() * dense_subspace_distance(&hd);
                let violation = (lhs - rhs).max(report.lhs - report.rhs);
                out.record(case, violation, report.holds && lhs <= rhs + BOUND_SLACK);
            }
            Err(e) => out.fail(case, e),
        }
    }
    out
}

fn gradient_result(out: &mut SuiteResult, case: String, checks: Result<Vec<crate::numeric::GroupCheck>>) {
    match checks {
        Ok(groups) => {
            for g in groups {
                out.record(format!("{case} {}", g.group), g.relative_error, g.relative_error <= GRADIENT_TOLERANCE);
            }
        }
        Err(e) => out.fail(case, e),
    }
}

fn small_encoder<R: Rng + ?Sized>(rng: &mut R) -> Result<TransformerEncoder> {
    let heads = rng.random_range(1..=2);
    let config = EncoderConfig {
        layers: 2,
        heads,
        model_dim: 4 * heads,
        ff_dim: 12,
        vocab_size: 12,
        max_seq_len: 8,
        sink_bias: rng.random_range(0.0..4.0),
        sink_positions: vec![0],
        seed: rng.random(),
    };
    TransformerEncoder::new(config)
}

fn random_tokens<R: Rng + ?Sized>(vocab: usize, rng: &mut R) -> Vec<usize> {
    let n = rng.random_range(3..=8);
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

/// Finite-difference checks of the encoder, every class-head variant on top
/// of it, and the case-study model (including derived attention weights).
/// One case per parameter group.
pub fn gradient_suite(models: usize, seed: u64) -> SuiteResult {
    let mut rng = rng::stream(seed, "verify.gradients");
    let mut out = SuiteResult::new("gradients", GRADIENT_TOLERANCE);
    for m in 0..models {
        let encoder = match small_encoder(&mut rng) {
            Ok(e) => e,
            Err(e) => {
                out.fail(format!("encoder {m}"), e);
                continue;
            }
        };
        let tokens = random_tokens(encoder.config().vocab_size, &mut rng);
        let d = encoder.config().model_dim;
        let weights = Matrix::random_normal(tokens.len(), d, 1.0, &mut rng);
        let checks = check_gradients(
            &[encoder.params()],
            |t, b| {
                let nodes = encoder.build(t, &b[0], &tokens, &ForwardOptions::default())?;
                let w = t.constant(weights.clone());
                let prod = t.hadamard(nodes.output, w);
                Ok(t.sum_all(prod))
            },
            GRADIENT_STEP,
            16,
            &mut rng,
        );
        gradient_result(&mut out, format!("encoder {m}"), checks);

        let variants = [
            HeadVariant::RegularCls,
            HeadVariant::PrescaleFull,
            HeadVariant::Uniform,
            HeadVariant::SinkOnly { positions: vec![0, 1] },
        ];
        for variant in variants {
            let label = format!("head {m} {variant:?}");
            let head = (|| -> Result<ClassHead> {
                let mut head = ClassHead::new(variant.clone(), d)?;
                head.add_task(2, &mut rng)?;
                head.add_task(3, &mut rng)?;
                let names: Vec<String> = head.params().names().map(str::to_string).collect();
                for name in names {
                    let p = head.params_mut().get_mut(&name).expect("listed");
                    let (r, c) = p.shape();
                    *p = p.add(&Matrix::random_normal(r, c, 0.5, &mut rng));
                }
                Ok(head)
            })();
            let head = match head {
                Ok(h) => h,
                Err(e) => {
                    out.fail(label, e);
                    continue;
                }
            };
            let target = rng.random_range(0..5);
            let checks = check_gradients(
                &[encoder.params(), head.params()],
                |t, b| {
                    let nodes = encoder.build(t, &b[0], &tokens, &ForwardOptions::default())?;
                    let logits = head.build_logits(t, &b[1], nodes.output, &[0, 1], None)?;
                    Ok(t.cross_entropy(logits, &[target]))
                },
                GRADIENT_STEP,
                8,
                &mut rng,
            );
            gradient_result(&mut out, label, checks);
        }

        for case in [2 * m, 2 * m + 1] {
            let k = rng.random_range(0..=2);
            let (task, _, params) = random_case_study(case, k, &mut rng);
            let mut store = ParamStore::new();
            store.insert("w", params.w.clone());
            store.insert("v", Matrix::col_vector(&params.v1));
            if let AttentionSource::Derived { query, key, readout } = &task.attention {
                store.insert("query", query.clone());
                store.insert("key", key.clone());
                store.insert("readout", Matrix::col_vector(readout));
            }
            let checks = check_gradients(
                &[&store],
                |t, b| case_study_loss(t, &task, &b[0]),
                GRADIENT_STEP,
                usize::MAX,
                &mut rng,
            );
            gradient_result(&mut out, format!("case-study {case}"), checks);
        }
    }
    out
}

/// `½(bᵀ A X W v − y)²` on the tape, with derived attention recomputed from
/// bound weights when present.
fn case_study_loss(t: &mut Tape, task: &CaseStudyTask, b: &crate::numeric::Bindings) -> Result<crate::numeric::NodeId> {
    let x = t.constant(task.x.clone());
    let scale = 1.0 / (task.dim() as f64).sqrt();
    let (a, readout) = match &task.attention {
        AttentionSource::Direct { a, b: weights } => (t.constant(a.matrix().clone()), t.constant(Matrix::row_vector(weights))),
        AttentionSource::Derived { .. } => {
            let q = t.matmul(x, b.id("query"));
            let k = t.matmul(x, b.id("key"));
            let logits = t.matmul_t(q, k);
            let logits = t.scale(logits, scale);
            let a = t.row_softmax(logits);
            let col = t.matmul(x, b.id("readout"));
            let row = t.transpose(col);
            let row = t.scale(row, scale);
            (a, t.row_softmax(row))
        }
    };
    let ba = t.matmul(readout, a);
    let bax = t.matmul(ba, x);
    let baxw = t.matmul(bax, b.id("w"));
    let y_hat = t.matmul(baxw, b.id("v"));
    let y = t.constant(Matrix::scalar(task.y));
    let r = t.sub(y_hat, y);
    let sq = t.hadamard(r, r);
    Ok(t.scale(sq, 0.5))
}

fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom == 0.0 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

/// Closed-form interference against the autodiff gradient dot product, in
/// sink (`k > 0`) and no-sink (`k = 0`) regimes.
pub fn interference_suite(cases: usize, seed: u64) -> SuiteResult {
    let mut rng = rng::stream(seed, "verify.interference");
    let mut out = SuiteResult::new("interference_equivalence", INTERFERENCE_TOLERANCE);
    for case in 0..cases {
        let k = if case % 3 == 0 { 0 } else { rng.random_range(1..=3) };
        let (t1, t2, params) = random_case_study(case, k, &mut rng);
        match (
            interference_closed_form(&t1, &t2, &params),
            interference_autodiff(&t1, &t2, &params),
        ) {
            (Ok(closed), Ok(auto)) => {
                let err = relative_error(closed, auto);
                out.record(case, err, err <= INTERFERENCE_TOLERANCE);
            }
            (Err(e), _) | (_, Err(e)) => out.fail(case, e),
        }
    }
    out
}

/// `r + s + δ = Bᵀ`; also `s = δ = 0` for `k = 0` and `δ = 0` for
/// zero-deviation sinks.
pub fn decomposition_suite(cases: usize, seed: u64) -> SuiteResult {
    let mut rng = rng::stream(seed, "verify.decomposition");
    let mut out = SuiteResult::new("decomposition", RECONSTRUCTION_TOLERANCE);
    for case in 0..cases {
        let k = case % 4;
        let (mut task, _, _) = random_case_study(case, k, &mut rng);
        let constant_sinks = case % 8 >= 4 && k > 0;
        if constant_sinks {
            let n = task.n();
            let sixty_fourths = rng.random_range(0..=64 / k as u32);
            task.attention = AttentionSource::Direct {
                a: constant_sink_attention(n, k, sixty_fourths, &mut rng),
                b: random_probability(n, &mut rng),
            };
        }
        let result = decompose_representation(&task).and_then(|dec| Ok((dec, task.representation()?)));
        match result {
            Ok((dec, b)) => {
                let diff: Vec<f64> = dec.reconstruct().iter().zip(&b).map(|(x, y)| x - y).collect();
                let err = norm(&diff);
                let mut ok = err <= RECONSTRUCTION_TOLERANCE;
                if k == 0 {
                    ok &= dec.s.iter().chain(&dec.delta).all(|v| *v == 0.0);
                }
                if constant_sinks {
                    ok &= dec.delta.iter().all(|v| *v == 0.0);
                }
                out.record(case, err, ok);
            }
            Err(e) => out.fail(case, e),
        }
    }
    out
}

/// Scaling-head logits with one-hot CLS attention against regular-head
/// logits on random encoders and inputs.
pub fn onehot_cls_suite(cases: usize, seed: u64) -> SuiteResult {
    let mut rng = rng::stream(seed, "verify.onehot");
    let mut out = SuiteResult::new("onehot_cls", ONEHOT_TOLERANCE);
    for case in 0..cases {
        let result = (|| -> Result<f64> {
            let encoder = small_encoder(&mut rng)?;
            let mut head = ClassHead::new(HeadVariant::RegularCls, encoder.config().model_dim)?;
            let tasks = rng.random_range(1..=3);
            for _ in 0..tasks {
                head.add_task(rng.random_range(1..=4), &mut rng)?;
            }
            let blocks: Vec<usize> = (0..tasks).filter(|_| rng.random_bool(0.7)).collect();
            let blocks = if blocks.is_empty() { vec![0] } else { blocks };
            let tokens = random_tokens(encoder.config().vocab_size, &mut rng);
            Ok(cls_onehot_equivalence(&encoder, &head, &tokens, &blocks)?.max_abs_diff)
        })();
        match result {
            Ok(err) => out.record(case, err, err <= ONEHOT_TOLERANCE),
            Err(e) => out.fail(case, e),
        }
    }
    out
}

pub fn run_all(cfg: &VerifyConfig) -> Vec<SuiteResult> {
    vec![
        eigen_bound_suite(cfg.matrix_cases, cfg.seed),
        contraction_suite(cfg.matrix_cases, cfg.seed),
        gradient_suite(cfg.gradient_cases, cfg.seed),
        interference_suite(cfg.equivalence_cases, cfg.seed),
        decomposition_suite(cfg.equivalence_cases, cfg.seed),
        onehot_cls_suite(cfg.equivalence_cases, cfg.seed),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_runs_pass() {
        let cfg = VerifyConfig {
            seed: 3,
            matrix_cases: 50,
            equivalence_cases: 20,
            gradient_cases: 1,
        };
        for suite in run_all(&cfg) {
            assert!(suite.all_passed(), "{suite:?}");
        }
    }

    #[test]
    fn dense_oracle_on_uniform_is_zero() {
        assert!(dense_lambda_max(&AttentionMatrix::uniform(5)).abs() < 1e-14);
    }
}
