//! Sequential-task training over synthetic orthogonal task sequences, with
//! accuracy matrices, ACC/FGT and per-boundary attention summaries.
//!
//! Forgetting uses the max-over-history convention: for every task `j`
//! before the last, `f_j = max_{l ∈ [j, T−2]} R[l][j] − R[T−1][j]`, and FGT is
//! the mean of `f_j`. Negative values (backward transfer) are kept.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, PretrainConfig, TransformerEncoder, COMMON_TOKENS};
use crate::error::{Error, Result};
use crate::metrics::{oversmoothing_similarity, AttentionMatrix, SinkStats};
use crate::numeric::Matrix;
use crate::prescale::{ClassifierModel, HeadVariant, LabeledSequence, MaskMode, StageConfig};
use crate::rng;

pub const FGT_CONVENTION: &str =
    "mean over tasks j < T-1 of (max over l in [j, T-2] of R[l][j]) - R[T-1][j]; negative values kept";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[serde(alias = "FT")]
    Ft,
    #[serde(alias = "PT+FT", alias = "pt+ft")]
    PtFt,
    #[serde(alias = "Prescale")]
    Prescale,
    #[serde(alias = "Uniform")]
    Uniform,
    #[serde(alias = "SinkOnly")]
    SinkOnly,
    #[serde(alias = "Separate")]
    Separate,
    #[serde(alias = "MTL")]
    Mtl,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Ft,
        Strategy::PtFt,
        Strategy::Prescale,
        Strategy::Uniform,
        Strategy::SinkOnly,
        Strategy::Separate,
        Strategy::Mtl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Ft => "FT",
            Strategy::PtFt => "PT+FT",
            Strategy::Prescale => "Prescale",
            Strategy::Uniform => "Uniform",
            Strategy::SinkOnly => "SinkOnly",
            Strategy::Separate => "Separate",
            Strategy::Mtl => "MTL",
        }
    }

    /// Whether tasks are learned one after another by a single model.
    pub fn is_sequential(self) -> bool {
        !matches!(self, Strategy::Separate | Strategy::Mtl)
    }

    fn probes_first(self) -> bool {
        matches!(
            self,
            Strategy::PtFt | Strategy::Prescale | Strategy::Uniform | Strategy::SinkOnly | Strategy::Separate | Strategy::Mtl
        )
    }

    fn head(self, common_count: usize) -> HeadVariant {
        match self {
            Strategy::Prescale => HeadVariant::PrescaleFull,
            Strategy::Uniform => HeadVariant::Uniform,
            Strategy::SinkOnly => HeadVariant::SinkOnly {
                positions: (0..common_count.max(1)).collect(),
            },
            _ => HeadVariant::RegularCls,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace(['-', '_'], "");
        Strategy::ALL
            .into_iter()
            .find(|st| st.name().to_ascii_lowercase().replace('+', "") == key.replace('+', ""))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    TaskAware,
    TaskAgnostic,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::TaskAware => "task_aware",
            EvalMode::TaskAgnostic => "task_agnostic",
        }
    }
}

/// Parameters of the synthetic task sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SequenceConfig {
    pub num_tasks: usize,
    /// Class count per task; a single entry is repeated for every task.
    pub classes_per_task: Vec<usize>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Shared prefix length (at most the number of reserved common ids).
    pub common_count: usize,
    pub seq_len: usize,
    /// Private keyword ids per class.
    pub keywords_per_class: usize,
    /// Private filler ids per task.
    pub fillers_per_task: usize,
    pub seed: u64,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            num_tasks: 3,
            classes_per_task: vec![2],
            train_per_class: 32,
            test_per_class: 16,
            common_count: COMMON_TOKENS,
            seq_len: 8,
            keywords_per_class: 2,
            fillers_per_task: 6,
            seed: 0,
        }
    }
}

impl SequenceConfig {
    pub fn classes(&self, task: usize) -> usize {
        if self.classes_per_task.len() == 1 {
            self.classes_per_task[0]
        } else {
            self.classes_per_task[task]
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 {
            return Err(Error::InvalidArgument("num_tasks must be positive".into()));
        }
        if self.classes_per_task.len() != 1 && self.classes_per_task.len() != self.num_tasks {
            return Err(Error::InvalidArgument(
                "classes_per_task needs one entry or one per task".into(),
            ));
        }
        if self.classes_per_task.iter().any(|&c| c < 2) {
            return Err(Error::InvalidArgument("every task needs at least two classes".into()));
        }
        if self.common_count > COMMON_TOKENS {
            return Err(Error::InvalidArgument(format!(
                "common_count may not exceed {COMMON_TOKENS}"
            )));
        }
        if self.seq_len <= self.common_count {
            return Err(Error::InvalidArgument("seq_len must leave room after the common prefix".into()));
        }
        if self.keywords_per_class == 0 || self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::InvalidArgument(
                "keywords, train and test counts must be positive".into(),
            ));
        }
        Ok(())
    }

    fn task_vocab(&self, task: usize) -> usize {
        self.classes(task) * self.keywords_per_class + self.fillers_per_task
    }

    /// Ids used by the sequence, including the reserved common ids.
    pub fn vocab_needed(&self) -> usize {
        COMMON_TOKENS + (0..self.num_tasks).map(|t| self.task_vocab(t)).sum::<usize>()
    }

    pub fn max_classes(&self) -> usize {
        (0..self.num_tasks).map(|t| self.classes(t)).max().unwrap_or(0)
    }

    /// Smallest embedding width hosting the common directions and one
    /// private block per task.
    pub fn min_dim(&self) -> usize {
        self.common_count + self.num_tasks * self.max_classes()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: usize,
    pub classes: usize,
    pub train: Vec<LabeledSequence>,
    pub test: Vec<LabeledSequence>,
    pub common_positions: Vec<usize>,
    /// Embedding coordinates `[start, end)` private to this task.
    pub embedding_block: (usize, usize),
    /// Token ids private to this task.
    pub vocab: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSequence {
    pub tasks: Vec<TaskSpec>,
    /// `vocab × dim` token embeddings with task-disjoint coordinate support.
    pub embeddings: Matrix,
    pub seed: u64,
}

impl TaskSequence {
    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    /// First global class index of each task.
    pub fn class_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.tasks.len());
        let mut acc = 0;
        for t in &self.tasks {
            offsets.push(acc);
            acc += t.classes;
        }
        offsets
    }
}

/// Builds a task sequence whose non-common token embeddings occupy
/// task-private coordinate blocks and whose common tokens occupy a separate
/// shared block, so cross-task dot products are exactly zero.
///
/// Every sequence is the common prefix `0..k` followed by task fillers with
/// one class keyword at a random position; the label depends only on the
/// keyword.
pub fn make_synthetic_sequence(cfg: &SequenceConfig, vocab_size: usize, dim: usize) -> Result<TaskSequence> {
    cfg.validate()?;
    if dim < cfg.min_dim() {
        return Err(Error::InvalidArgument(format!(
            "embedding dim {dim} too small: need at least {} ({} common + {} tasks x {} classes)",
            cfg.min_dim(),
            cfg.common_count,
            cfg.num_tasks,
            cfg.max_classes()
        )));
    }
    if vocab_size < cfg.vocab_needed() + 1 {
        return Err(Error::InvalidArgument(format!(
            "vocab_size {vocab_size} too small: need at least {} (including the mask id)",
            cfg.vocab_needed() + 1
        )));
    }
    let mut rng = rng::stream(cfg.seed, rng::DATA);
    let k = cfg.common_count;
    let block = (dim - k) / cfg.num_tasks;

    let mut embeddings = Matrix::zeros(vocab_size, dim);
    for j in 0..COMMON_TOKENS {
        if j < k {
            embeddings[(j, j)] = 1.0;
        } else {
            // Reserved but unused in this sequence: keep inside the common block.
            embeddings[(j, j % k.max(1))] = if k == 0 { 0.0 } else { 1.0 };
        }
    }

    let mut tasks = Vec::with_capacity(cfg.num_tasks);
    let mut next_id = COMMON_TOKENS;
    for t in 0..cfg.num_tasks {
        let classes = cfg.classes(t);
        let vocab = (next_id, next_id + cfg.task_vocab(t));
        next_id = vocab.1;
        let embedding_block = (k + t * block, k + (t + 1) * block);
        for id in vocab.0..vocab.1 {
            let row = Matrix::random_normal(1, block, 1.0 / (block as f64).sqrt(), &mut rng);
            embeddings.row_mut(id)[embedding_block.0..embedding_block.1].copy_from_slice(row.data());
        }
        let keyword = |class: usize, i: usize| vocab.0 + class * cfg.keywords_per_class + i;
        let filler_start = vocab.0 + classes * cfg.keywords_per_class;
        let body = cfg.seq_len - k;

        let draw = |per_class: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            let mut out = Vec::with_capacity(per_class * classes);
            for _ in 0..per_class {
                for class in 0..classes {
                    let mut tokens: Vec<usize> = (0..k).collect();
                    let slot = rng.random_range(0..body);
                    for p in 0..body {
                        tokens.push(if p == slot {
                            keyword(class, rng.random_range(0..cfg.keywords_per_class))
                        } else if cfg.fillers_per_task > 0 {
                            filler_start + rng.random_range(0..cfg.fillers_per_task)
                        } else {
                            keyword(class, 0)
                        });
                    }
                    out.push(LabeledSequence { tokens, label: class });
                }
            }
            out
        };
        let train = draw(cfg.train_per_class, &mut rng);
        let test = draw(cfg.test_per_class, &mut rng);
        tasks.push(TaskSpec {
            id: t,
            classes,
            train,
            test,
            common_positions: (0..k).collect(),
            embedding_block,
            vocab,
        });
    }
    Ok(TaskSequence {
        tasks,
        embeddings,
        seed: cfg.seed,
    })
}

/// `R[t][j]`: accuracy on task `j` after training through task `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub rows: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        Self {
            rows: (0..tasks).map(|t| vec![None; t + 1]).collect(),
        }
    }

    /// Builds from complete lower-triangular rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let mut r = Self::new(rows.len());
        for (t, row) in rows.iter().enumerate() {
            if row.len() != t + 1 {
                return Err(Error::InvalidArgument(format!(
                    "row {t} must have {} entries, got {}",
                    t + 1,
                    row.len()
                )));
            }
            for (j, v) in row.iter().enumerate() {
                r.set(t, j, *v)?;
            }
        }
        Ok(r)
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn set(&mut self, t: usize, j: usize, value: f64) -> Result<()> {
        if t >= self.tasks() || j > t {
            return Err(Error::InvalidArgument(format!("R[{t}][{j}] outside the lower triangle")));
        }
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::InvalidArgument(format!("accuracy {value} outside [0, 1]")));
        }
        self.rows[t][j] = Some(value);
        Ok(())
    }

    pub fn get(&self, t: usize, j: usize) -> Option<f64> {
        self.rows.get(t).and_then(|r| r.get(j)).copied().flatten()
    }

    fn require(&self, t: usize, j: usize) -> Result<f64> {
        self.get(t, j)
            .ok_or_else(|| Error::InvalidArgument(format!("accuracy matrix incomplete at R[{t}][{j}]")))
    }

    pub fn diagonal_mean(&self) -> Result<f64> {
        let t = self.tasks();
        if t == 0 {
            return Err(Error::InvalidArgument("empty accuracy matrix".into()));
        }
        Ok((0..t).map(|j| self.require(j, j)).sum::<Result<f64>>()? / t as f64)
    }
}

/// Mean of the final row.
pub fn acc_metric(r: &AccuracyMatrix) -> Result<f64> {
    let t = r.tasks();
    if t == 0 {
        return Err(Error::InvalidArgument("empty accuracy matrix".into()));
    }
    Ok((0..t).map(|j| r.require(t - 1, j)).sum::<Result<f64>>()? / t as f64)
}

/// Max-over-history minus final accuracy, averaged over all but the last task.
pub fn fgt_metric(r: &AccuracyMatrix) -> Result<f64> {
    let t = r.tasks();
    if t < 2 {
        return Err(Error::InvalidArgument("forgetting needs at least two tasks".into()));
    }
    let mut total = 0.0;
    for j in 0..t - 1 {
        let mut best = f64::NEG_INFINITY;
        for l in j..t - 1 {
            best = best.max(r.require(l, j)?);
        }
        total += best - r.require(t - 1, j)?;
    }
    Ok(total / (t - 1) as f64)
}

/// Final-layer attention and representation summary on the probe batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryMetrics {
    /// 0 before any training, `t + 1` after task `t`.
    pub boundary: usize,
    pub similarity: f64,
    pub top1_deviation: f64,
    pub top5_deviation: f64,
    pub top1_degree: f64,
    /// Deviation of the first sink position (mean over the probe batch).
    pub sink_deviation: f64,
}

/// Averages the per-sequence summaries of `probe`.
pub fn boundary_metrics(
    encoder: &TransformerEncoder,
    probe: &[Vec<usize>],
    boundary: usize,
) -> Result<BoundaryMetrics> {
    if probe.is_empty() {
        return Err(Error::InvalidArgument("empty probe batch".into()));
    }
    if encoder.config().layers == 0 {
        return Err(Error::InvalidArgument("boundary metrics need at least one layer".into()));
    }
    let sink = encoder.config().sink_positions.first().copied().unwrap_or(0);
    let mut acc = [0.0; 5];
    for tokens in probe {
        let (h, trace) = encoder.forward_with_trace(tokens)?;
        let last = trace.attentions.last().expect("at least one layer");
        let stats = SinkStats::from_attention(&AttentionMatrix::mean_of(last)?);
        acc[0] += oversmoothing_similarity(&h)?.mean;
        acc[1] += stats.top1_deviation();
        acc[2] += stats.topk_mean_deviation(5.min(stats.n()));
        acc[3] += stats.outer_degrees[stats.top1()];
        acc[4] += stats.deviations[sink.min(stats.n() - 1)];
    }
    let m = probe.len() as f64;
    Ok(BoundaryMetrics {
        boundary,
        similarity: acc[0] / m,
        top1_deviation: acc[1] / m,
        top5_deviation: acc[2] / m,
        top1_degree: acc[3] / m,
        sink_deviation: acc[4] / m,
    })
}

/// Everything needed to run one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    #[serde(alias = "strategy", deserialize_with = "one_or_many")]
    pub strategies: Vec<Strategy>,
    pub sequence: SequenceConfig,
    pub encoder: EncoderConfig,
    pub stages: StageConfig,
    /// Masked-token pretraining before the first task (0 disables it).
    pub pretrain: PretrainConfig,
    pub seeds: Vec<u64>,
    /// Sequences per task in the fixed boundary-metrics probe batch.
    pub probe_per_task: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            strategies: vec![Strategy::Ft],
            sequence: SequenceConfig::default(),
            encoder: EncoderConfig::default(),
            stages: StageConfig::default(),
            pretrain: PretrainConfig {
                steps: 0,
                ..PretrainConfig::default()
            },
            seeds: vec![0],
            probe_per_task: 4,
        }
    }
}

fn one_or_many<'de, D>(d: D) -> std::result::Result<Vec<Strategy>, D::Error>
where
    D: serde::Deserializer<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(Strategy),
        Many(Vec<Strategy>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(s) => vec![s],
        OneOrMany::Many(v) => v,
    })
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::InvalidArgument("no strategies configured".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("no seeds configured".into()));
        }
        if self.probe_per_task == 0 {
            return Err(Error::InvalidArgument("probe_per_task must be positive".into()));
        }
        self.sequence.validate()?;
        self.encoder.validate()?;
        self.stages.validate()?;
        if self.encoder.layers == 0 {
            return Err(Error::InvalidArgument("the encoder needs at least one layer".into()));
        }
        if self.sequence.seq_len > self.encoder.max_seq_len {
            return Err(Error::InvalidArgument(format!(
                "seq_len {} exceeds encoder max_seq_len {}",
                self.sequence.seq_len, self.encoder.max_seq_len
            )));
        }
        if let Some(&p) = self.encoder.sink_positions.iter().find(|&&p| p >= self.encoder.max_seq_len) {
            return Err(Error::InvalidArgument(format!("sink position {p} beyond max_seq_len")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub task_aware: AccuracyMatrix,
    pub task_agnostic: AccuracyMatrix,
    pub boundaries: Vec<BoundaryMetrics>,
    /// Entries where task-agnostic accuracy exceeded task-aware accuracy.
    pub agnostic_exceeds_aware: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: EvalMode,
    pub acc: f64,
    /// `None` where forgetting is not applicable.
    pub fgt: Option<f64>,
    pub per_seed_acc: Vec<f64>,
    pub per_seed_fgt: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClReport {
    pub strategy: Strategy,
    pub fgt_convention: String,
    pub modes: Vec<ModeSummary>,
    /// Seed-averaged boundary metrics.
    pub boundaries: Vec<BoundaryMetrics>,
    pub runs: Vec<SeedRun>,
}

impl ClReport {
    pub fn mode(&self, mode: EvalMode) -> &ModeSummary {
        self.modes.iter().find(|m| m.mode == mode).expect("both modes present")
    }

    pub fn final_boundary(&self) -> &BoundaryMetrics {
        self.boundaries.last().expect("at least one boundary")
    }
}

/// A sanity-band alert: a sequential strategy beat both reference lines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SanityAlert {
    pub strategy: Strategy,
    pub mode: EvalMode,
    pub acc: f64,
    pub reference: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub reports: Vec<ClReport>,
    pub sanity_alerts: Vec<SanityAlert>,
}

impl ExperimentReport {
    pub fn report(&self, strategy: Strategy) -> Option<&ClReport> {
        self.reports.iter().find(|r| r.strategy == strategy)
    }
}

/// Fresh encoder for one run: config seed replaced by the run seed, token
/// embeddings taken from the sequence, optional pretraining, then sinks.
pub fn initial_encoder(cfg: &ExperimentConfig, sequence: &TaskSequence, seed: u64) -> Result<TransformerEncoder> {
    let mut enc_cfg = cfg.encoder.clone();
    enc_cfg.seed = seed;
    let beta = enc_cfg.sink_bias;
    let positions = enc_cfg.sink_positions.clone();
    enc_cfg.sink_bias = 0.0;
    let mut encoder = TransformerEncoder::new(enc_cfg)?;
    encoder.set_token_embeddings(sequence.embeddings.clone())?;
    if cfg.pretrain.steps > 0 {
        let corpus: Vec<Vec<usize>> = sequence
            .tasks
            .iter()
            .flat_map(|t| t.train.iter().map(|e| e.tokens.clone()))
            .collect();
        let pre = PretrainConfig {
            seed,
            ..cfg.pretrain.clone()
        };
        encoder.pretrain_sink_free(&corpus, &pre)?;
    }
    encoder.induce_sinks(beta, &positions)?;
    Ok(encoder)
}

fn probe_batch(sequence: &TaskSequence, per_task: usize) -> Vec<Vec<usize>> {
    sequence
        .tasks
        .iter()
        .flat_map(|t| t.test.iter().take(per_task).map(|e| e.tokens.clone()))
        .collect()
}

fn train_task<R: Rng>(
    model: &mut ClassifierModel,
    strategy: Strategy,
    data: &[LabeledSequence],
    blocks: &[usize],
    stages: &StageConfig,
    rng: &mut R,
) -> Result<()> {
    if strategy.probes_first() {
        model.encoder.params_mut().freeze_all(true);
        model.probe_stage(data, blocks, stages, rng)?;
        model.encoder.params_mut().freeze_all(false);
    }
    model.finetune_stage(data, blocks, stages, rng)?;
    Ok(())
}

/// Trains and evaluates one strategy for one seed.
pub fn run_seed(cfg: &ExperimentConfig, sequence: &TaskSequence, strategy: Strategy, seed: u64) -> Result<SeedRun> {
    train_model(cfg, sequence, strategy, seed).map(|(run, _)| run)
}

/// Like [`run_seed`], also returning the final model (for `Separate`, the
/// model of the last task).
pub fn train_model(
    cfg: &ExperimentConfig,
    sequence: &TaskSequence,
    strategy: Strategy,
    seed: u64,
) -> Result<(SeedRun, ClassifierModel)> {
    let t_count = sequence.task_count();
    let offsets = sequence.class_offsets();
    let probe = probe_batch(sequence, cfg.probe_per_task);
    let mut shuffle = rng::stream(seed, "shuffle");
    let mut head_init = rng::stream(seed, "init.head");
    let mut aware = AccuracyMatrix::new(t_count);
    let mut agnostic = AccuracyMatrix::new(t_count);
    let mut exceed = 0;
    let head = strategy.head(cfg.sequence.common_count);

    let encoder = initial_encoder(cfg, sequence, seed)?;
    let mut boundaries = vec![boundary_metrics(&encoder, &probe, 0)?];

    let model = match strategy {
        Strategy::Separate => {
            let mut last = None;
            for (t, task) in sequence.tasks.iter().enumerate() {
                let mut model = ClassifierModel::new(encoder.clone(), head.clone())?;
                model.head.add_task(task.classes, &mut head_init)?;
                train_task(&mut model, strategy, &task.train, &[0], &cfg.stages, &mut shuffle)?;
                let acc = model.accuracy(&task.test, &[0], 0)?;
                aware.set(t, t, acc)?;
                agnostic.set(t, t, acc)?;
                boundaries.push(boundary_metrics(&model.encoder, &probe, t + 1)?);
                last = Some(model);
            }
            last.expect("validated sequences have at least one task")
        }
        Strategy::Mtl => {
            let mut model = ClassifierModel::new(encoder, head)?;
            for task in &sequence.tasks {
                model.head.add_task(task.classes, &mut head_init)?;
            }
            let all: Vec<usize> = (0..t_count).collect();
            let mut union: Vec<LabeledSequence> = sequence
                .tasks
                .iter()
                .zip(&offsets)
                .flat_map(|(task, off)| {
                    task.train.iter().map(move |e| LabeledSequence {
                        tokens: e.tokens.clone(),
                        label: e.label + off,
                    })
                })
                .collect();
            union.shuffle(&mut shuffle);
            train_task(&mut model, strategy, &union, &all, &cfg.stages, &mut shuffle)?;
            for (j, task) in sequence.tasks.iter().enumerate() {
                aware.set(t_count - 1, j, model.accuracy(&task.test, &[j], 0)?)?;
                agnostic.set(t_count - 1, j, model.accuracy(&task.test, &all, offsets[j])?)?;
            }
            boundaries.push(boundary_metrics(&model.encoder, &probe, t_count)?);
            model
        }
        _ => {
            let mut model = ClassifierModel::new(encoder, head)?;
            for (t, task) in sequence.tasks.iter().enumerate() {
                model.head.add_task(task.classes, &mut head_init)?;
                train_task(&mut model, strategy, &task.train, &[t], &cfg.stages, &mut shuffle)?;
                let seen: Vec<usize> = (0..=t).collect();
                for (j, past) in sequence.tasks.iter().enumerate().take(t + 1) {
                    let a = model.accuracy(&past.test, &[j], 0)?;
                    let g = model.accuracy(&past.test, &seen, offsets[j])?;
                    if g > a {
                        exceed += 1;
                    }
                    aware.set(t, j, a)?;
                    agnostic.set(t, j, g)?;
                }
                boundaries.push(boundary_metrics(&model.encoder, &probe, t + 1)?);
            }
            model
        }
    };
    let run = SeedRun {
        seed,
        task_aware: aware,
        task_agnostic: agnostic,
        boundaries,
        agnostic_exceeds_aware: exceed,
    };
    Ok((run, model))
}

fn seed_scores(strategy: Strategy, r: &AccuracyMatrix) -> Result<(f64, Option<f64>)> {
    match strategy {
        Strategy::Separate => Ok((r.diagonal_mean()?, Some(0.0))),
        Strategy::Mtl => Ok((acc_metric(r)?, None)),
        _ if r.tasks() < 2 => Ok((acc_metric(r)?, Some(0.0))),
        _ => Ok((acc_metric(r)?, Some(fgt_metric(r)?))),
    }
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, count) = values.into_iter().fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    sum / count as f64
}

/// Runs every seed of one strategy (in parallel) and aggregates in seed order.
pub fn run_sequence(cfg: &ExperimentConfig, sequence: &TaskSequence, strategy: Strategy) -> Result<ClReport> {
    let runs: Vec<SeedRun> = cfg
        .seeds
        .par_iter()
        .map(|&seed| run_seed(cfg, sequence, strategy, seed))
        .collect::<Result<_>>()?;

    let mut modes = Vec::with_capacity(2);
    for mode in [EvalMode::TaskAware, EvalMode::TaskAgnostic] {
        let scores: Vec<(f64, Option<f64>)> = runs
            .iter()
            .map(|r| {
                seed_scores(
                    strategy,
                    match mode {
                        EvalMode::TaskAware => &r.task_aware,
                        EvalMode::TaskAgnostic => &r.task_agnostic,
                    },
                )
            })
            .collect::<Result<_>>()?;
        let per_seed_fgt: Vec<Option<f64>> = scores.iter().map(|s| s.1).collect();
        let fgt = if per_seed_fgt.iter().all(Option::is_some) {
            Some(mean(per_seed_fgt.iter().map(|f| f.expect("checked"))))
        } else {
            None
        };
        modes.push(ModeSummary {
            mode,
            acc: mean(scores.iter().map(|s| s.0)),
            fgt,
            per_seed_acc: scores.iter().map(|s| s.0).collect(),
            per_seed_fgt,
        });
    }

    let boundary_count = runs[0].boundaries.len();
    let boundaries = (0..boundary_count)
        .map(|b| {
            let rows: Vec<&BoundaryMetrics> = runs.iter().map(|r| &r.boundaries[b]).collect();
            BoundaryMetrics {
                boundary: rows[0].boundary,
                similarity: mean(rows.iter().map(|m| m.similarity)),
                top1_deviation: mean(rows.iter().map(|m| m.top1_deviation)),
                top5_deviation: mean(rows.iter().map(|m| m.top5_deviation)),
                top1_degree: mean(rows.iter().map(|m| m.top1_degree)),
                sink_deviation: mean(rows.iter().map(|m| m.sink_deviation)),
            }
        })
        .collect();

    Ok(ClReport {
        strategy,
        fgt_convention: FGT_CONVENTION.to_string(),
        modes,
        boundaries,
        runs,
    })
}

/// Generates the sequence, runs every configured strategy and checks the
/// reference sanity band.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let sequence = make_synthetic_sequence(&cfg.sequence, cfg.encoder.vocab_size, cfg.encoder.model_dim)?;
    let reports: Vec<ClReport> = cfg
        .strategies
        .iter()
        .map(|&s| run_sequence(cfg, &sequence, s))
        .collect::<Result<_>>()?;
    let sanity_alerts = sanity_band(&reports);
    Ok(ExperimentReport {
        config: cfg.clone(),
        reports,
        sanity_alerts,
    })
}

/// In-task accuracy of one trained model with attention to the common
/// positions kept and dropped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingRun {
    pub seed: u64,
    pub keep: f64,
    pub drop: f64,
    pub degenerate_rows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingReport {
    pub strategy: Strategy,
    pub positions: Vec<usize>,
    pub runs: Vec<MaskingRun>,
    pub mean_keep: f64,
    pub mean_drop: f64,
}

/// Trains the first task of the sequence with `strategy` (sinks as
/// configured) for every seed, then evaluates its test split with and
/// without attention to the shared prefix.
pub fn sink_masking_experiment(cfg: &ExperimentConfig, strategy: Strategy) -> Result<MaskingReport> {
    cfg.validate()?;
    if !strategy.is_sequential() {
        return Err(Error::InvalidArgument(format!(
            "{strategy} is a reference strategy; masking needs a single trained model"
        )));
    }
    let sequence = make_synthetic_sequence(&cfg.sequence, cfg.encoder.vocab_size, cfg.encoder.model_dim)?;
    let positions: Vec<usize> = (0..cfg.sequence.common_count).collect();
    let task = &sequence.tasks[0];
    let runs: Vec<MaskingRun> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let mut shuffle = rng::stream(seed, "shuffle");
            let mut head_init = rng::stream(seed, "init.head");
            let encoder = initial_encoder(cfg, &sequence, seed)?;
            let mut model = ClassifierModel::new(encoder, strategy.head(cfg.sequence.common_count))?;
            model.head.add_task(task.classes, &mut head_init)?;
            train_task(&mut model, strategy, &task.train, &[0], &cfg.stages, &mut shuffle)?;
            let keep = model.evaluate_with_sink_mask(&task.test, &[0], 0, &positions, MaskMode::Keep)?;
            let drop = model.evaluate_with_sink_mask(&task.test, &[0], 0, &positions, MaskMode::Drop)?;
            Ok(MaskingRun {
                seed,
                keep: keep.accuracy,
                drop: drop.accuracy,
                degenerate_rows: drop.degenerate_rows,
            })
        })
        .collect::<Result<_>>()?;
    Ok(MaskingReport {
        strategy,
        positions,
        mean_keep: mean(runs.iter().map(|r| r.keep)),
        mean_drop: mean(runs.iter().map(|r| r.drop)),
        runs,
    })
}

/// Sequential strategies whose ACC exceeds the best reference by more than
/// 0.02. Needs at least one of Separate or MTL in the report set.
pub fn sanity_band(reports: &[ClReport]) -> Vec<SanityAlert> {
    let mut alerts = Vec::new();
    for mode in [EvalMode::TaskAware, EvalMode::TaskAgnostic] {
        let reference = reports
            .iter()
            .filter(|r| !r.strategy.is_sequential())
            .map(|r| r.mode(mode).acc)
            .fold(f64::NEG_INFINITY, f64::max);
        if !reference.is_finite() {
            continue;
        }
        for r in reports.iter().filter(|r| r.strategy.is_sequential()) {
            let acc = r.mode(mode).acc;
            if acc > reference + 0.02 {
                alerts.push(SanityAlert {
                    strategy: r.strategy,
                    mode,
                    acc,
                    reference,
                });
            }
        }
    }
    alerts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn acc_examples() {
        assert_eq!(acc_metric(&AccuracyMatrix::from_rows(&[vec![1.0]]).unwrap()).unwrap(), 1.0);
        let r = AccuracyMatrix::from_rows(&[vec![0.9], vec![0.8, 0.9]]).unwrap();
        assert!((acc_metric(&r).unwrap() - 0.85).abs() < 1e-15);
    }

    #[test]
    fn fgt_examples() {
        let r = AccuracyMatrix::from_rows(&[vec![0.9], vec![0.7, 0.3]]).unwrap();
        assert!((fgt_metric(&r).unwrap() - 0.2).abs() < 1e-15);
        let flat = AccuracyMatrix::from_rows(&[vec![0.5], vec![0.5, 0.1], vec![0.5, 0.1, 0.2]]).unwrap();
        assert_eq!(fgt_metric(&flat).unwrap(), 0.0);
        assert!(fgt_metric(&AccuracyMatrix::from_rows(&[vec![1.0]]).unwrap()).is_err());
    }

    #[test]
    fn incomplete_matrix_is_an_error() {
        let mut r = AccuracyMatrix::new(2);
        r.set(0, 0, 1.0).unwrap();
        assert!(acc_metric(&r).is_err());
        assert!(r.set(0, 1, 0.5).is_err());
        assert!(r.set(1, 0, 1.5).is_err());
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("PT+FT".parse::<Strategy>().unwrap(), Strategy::PtFt);
        assert_eq!("sink_only".parse::<Strategy>().unwrap(), Strategy::SinkOnly);
        assert_eq!("mtl".parse::<Strategy>().unwrap(), Strategy::Mtl);
        assert!("replay".parse::<Strategy>().is_err());
    }

    #[test]
    fn dim_too_small_names_the_minimum() {
        let cfg = SequenceConfig::default();
        let err = make_synthetic_sequence(&cfg, 64, 5).unwrap_err().to_string();
        assert!(err.contains(&cfg.min_dim().to_string()), "{err}");
    }

    #[test]
    fn cross_task_embeddings_are_orthogonal() {
        let seq = make_synthetic_sequence(&SequenceConfig::default(), 64, 32).unwrap();
        let e = &seq.embeddings;
        for a in &seq.tasks {
            for b in seq.tasks.iter().filter(|b| b.id != a.id) {
                for i in a.vocab.0..a.vocab.1 {
                    for j in b.vocab.0..b.vocab.1 {
                        let dot: f64 = e.row(i).iter().zip(e.row(j)).map(|(x, y)| x * y).sum();
                        assert_eq!(dot, 0.0);
                    }
                }
                for c in 0..seq.tasks[0].common_positions.len() {
                    for i in a.vocab.0..a.vocab.1 {
                        let dot: f64 = e.row(c).iter().zip(e.row(i)).map(|(x, y)| x * y).sum();
                        assert_eq!(dot, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn sequences_share_common_prefix_and_labels_in_range() {
        let cfg = SequenceConfig {
            num_tasks: 1,
            ..SequenceConfig::default()
        };
        let seq = make_synthetic_sequence(&cfg, 64, 32).unwrap();
        assert_eq!(seq.task_count(), 1);
        for ex in seq.tasks[0].train.iter().chain(&seq.tasks[0].test) {
            assert_eq!(&ex.tokens[..4], &[0, 1, 2, 3]);
            assert!(ex.label < 2);
        }
    }

    #[test]
    fn config_accepts_single_strategy() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"strategy": "FT"}"#).unwrap();
        assert_eq!(cfg.strategies, vec![Strategy::Ft]);
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"strategies": ["prescale", "MTL"]}"#).unwrap();
        assert_eq!(cfg.strategies, vec![Strategy::Prescale, Strategy::Mtl]);
    }
}
