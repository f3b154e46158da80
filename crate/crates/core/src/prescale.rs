//! Class heads over encoder outputs: the per-class token-scaling head and
//! its regular, uniform and sink-only variants, plus probe and fine-tune
//! training stages.
//!
//! The scaling head computes `A_c = softmax(V f(H)ᵀ / √d)` (one row per
//! class) and scores class `i` as `A_c[i,:] · H · v_i`. With `A_c` one-hot at
//! the first position this reduces to the regular head `h_CLS · v_i`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{argmax, ForwardOptions, TransformerEncoder};
use crate::error::{Error, Result};
use crate::numeric::matrix::{row_softmax, softmax_in_place};
use crate::numeric::tape::softmax;
use crate::numeric::{Bindings, Matrix, NodeId, Optimizer, ParamStore, Tape};

pub const CLASS_VECTOR_SCALE: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadVariant {
    /// `h_CLS · v_i`, no bias.
    RegularCls,
    /// Learned per-class scaling over all tokens.
    PrescaleFull,
    /// Fixed `A_c = 1/n`.
    Uniform,
    /// Learned scaling restricted to the given positions.
    SinkOnly { positions: Vec<usize> },
}

impl HeadVariant {
    pub fn uses_scaling_map(&self) -> bool {
        matches!(self, HeadVariant::PrescaleFull | HeadVariant::SinkOnly { .. })
    }
}

/// `V` plus the affine map `f(H) = H W + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingLayer {
    pub class_vectors: Matrix,
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl ScalingLayer {
    fn check(&self, h: &Matrix) -> Result<()> {
        let d = self.class_vectors.cols();
        if h.cols() != d || self.weight.shape() != (d, d) || self.bias.len() != d {
            return Err(Error::Shape {
                op: "scaling layer",
                left: (h.rows(), d),
                right: h.shape(),
            });
        }
        Ok(())
    }

    fn logits_over(&self, h: &Matrix) -> Matrix {
        let d = self.class_vectors.cols();
        let mut fh = h.matmul(&self.weight);
        for i in 0..fh.rows() {
            for (v, b) in fh.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        self.class_vectors.matmul_t(&fh).scale(1.0 / (d as f64).sqrt())
    }

    /// `c×n` attention, one softmax row per class.
    pub fn scaled_attention(&self, h: &Matrix) -> Result<Matrix> {
        self.check(h)?;
        Ok(row_softmax(&self.logits_over(h)))
    }

    /// Like [`Self::scaled_attention`] but with support only on `positions`.
    pub fn sink_only_attention(&self, h: &Matrix, positions: &[usize]) -> Result<Matrix> {
        self.check(h)?;
        let support = valid_positions(positions, h.rows())?;
        let restricted = row_softmax(&self.logits_over(&h.select_rows(&support)));
        let mut out = Matrix::zeros(self.class_vectors.rows(), h.rows());
        for i in 0..out.rows() {
            for (s, &p) in support.iter().enumerate() {
                out[(i, p)] = restricted[(i, s)];
            }
        }
        Ok(out)
    }
}

fn valid_positions(positions: &[usize], n: usize) -> Result<Vec<usize>> {
    let mut support: Vec<usize> = positions.iter().copied().filter(|&p| p < n).collect();
    support.sort_unstable();
    support.dedup();
    if support.is_empty() {
        return Err(Error::InvalidArgument("sink-only head needs at least one sink position".into()));
    }
    Ok(support)
}

/// Per-class logits `A_c[i,:] · H · v_i`.
pub fn class_logits(attention: &Matrix, h: &Matrix, v: &Matrix) -> Result<Vec<f64>> {
    if attention.cols() != h.rows() || attention.rows() != v.rows() || h.cols() != v.cols() {
        return Err(Error::Shape {
            op: "class_logits",
            left: attention.shape(),
            right: h.shape(),
        });
    }
    let mixed = attention.matmul(h);
    Ok((0..v.rows())
        .map(|i| mixed.row(i).iter().zip(v.row(i)).map(|(a, b)| a * b).sum())
        .collect())
}

/// Softmax over classes of [`class_logits`].
pub fn class_probabilities(attention: &Matrix, h: &Matrix, v: &Matrix) -> Result<Vec<f64>> {
    let mut logits = class_logits(attention, h, v)?;
    softmax_in_place(&mut logits);
    Ok(logits)
}

/// Class vectors grouped per task, plus the optional scaling map.
#[derive(Clone, Debug)]
pub struct ClassHead {
    variant: HeadVariant,
    dim: usize,
    task_classes: Vec<usize>,
    params: ParamStore,
}

fn block_name(task: usize) -> String {
    format!("V.t{task}")
}

impl ClassHead {
    pub fn new(variant: HeadVariant, dim: usize) -> Result<Self> {
        if let HeadVariant::SinkOnly { positions } = &variant {
            if positions.is_empty() {
                return Err(Error::InvalidArgument("sink-only head needs at least one sink position".into()));
            }
        }
        let mut params = ParamStore::new();
        if variant.uses_scaling_map() {
            params.insert("f.w", Matrix::identity(dim));
            params.insert("f.b", Matrix::zeros(1, dim));
        }
        Ok(Self {
            variant,
            dim,
            task_classes: Vec::new(),
            params,
        })
    }

    /// Rebuilds a head from stored parameters.
    pub fn from_parts(variant: HeadVariant, dim: usize, task_classes: Vec<usize>, params: ParamStore) -> Result<Self> {
        let mut head = Self::new(variant, dim)?;
        for (t, &c) in task_classes.iter().enumerate() {
            head.params.insert(block_name(t), Matrix::zeros(c, dim));
        }
        for (name, m) in head.params.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| Error::Schema(format!("missing head tensor {name}")))?;
            if got.shape() != m.shape() {
                return Err(Error::Shape {
                    op: "head tensor",
                    left: m.shape(),
                    right: got.shape(),
                });
            }
        }
        if params.len() != head.params.len() {
            return Err(Error::Schema("unexpected extra head tensors".into()));
        }
        head.task_classes = task_classes;
        head.params = params;
        Ok(head)
    }

    /// Appends a block of `classes` class vectors and returns its task index.
    pub fn add_task<R: Rng + ?Sized>(&mut self, classes: usize, rng: &mut R) -> Result<usize> {
        if classes == 0 {
            return Err(Error::InvalidArgument("a task needs at least one class".into()));
        }
        let t = self.task_classes.len();
        self.params
            .insert(block_name(t), Matrix::random_normal(classes, self.dim, CLASS_VECTOR_SCALE, rng));
        self.task_classes.push(classes);
        Ok(t)
    }

    pub fn variant(&self) -> &HeadVariant {
        &self.variant
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn task_classes(&self) -> &[usize] {
        &self.task_classes
    }

    pub fn task_count(&self) -> usize {
        self.task_classes.len()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_parts(self) -> (HeadVariant, usize, Vec<usize>, ParamStore) {
        (self.variant, self.dim, self.task_classes, self.params)
    }

    fn check_blocks(&self, blocks: &[usize]) -> Result<()> {
        if blocks.is_empty() {
            return Err(Error::InvalidArgument("no class blocks selected".into()));
        }
        if let Some(&t) = blocks.iter().find(|&&t| t >= self.task_count()) {
            return Err(Error::InvalidArgument(format!(
                "task {t} has no class block (head has {})",
                self.task_count()
            )));
        }
        Ok(())
    }

    /// Stacked class vectors of the selected task blocks.
    pub fn class_vectors(&self, blocks: &[usize]) -> Result<Matrix> {
        self.check_blocks(blocks)?;
        let rows: Vec<Vec<f64>> = blocks
            .iter()
            .flat_map(|&t| self.params.get(&block_name(t)).expect("checked").to_rows())
            .collect();
        Matrix::from_rows(&rows)
    }

    pub fn scaling_layer(&self, blocks: &[usize]) -> Result<Option<ScalingLayer>> {
        if !self.variant.uses_scaling_map() {
            return Ok(None);
        }
        Ok(Some(ScalingLayer {
            class_vectors: self.class_vectors(blocks)?,
            weight: self.params.get("f.w").expect("scaling map").clone(),
            bias: self.params.get("f.b").expect("scaling map").row(0).to_vec(),
        }))
    }

    /// The `c×n` class-to-token attention this head applies to `h`.
    pub fn attention(&self, h: &Matrix, blocks: &[usize]) -> Result<Matrix> {
        let c: usize = {
            self.check_blocks(blocks)?;
            blocks.iter().map(|&t| self.task_classes[t]).sum()
        };
        let n = h.rows();
        match &self.variant {
            HeadVariant::RegularCls => Ok(Matrix::from_fn(c, n, |_, j| if j == 0 { 1.0 } else { 0.0 })),
            HeadVariant::Uniform => Ok(Matrix::filled(c, n, 1.0 / n as f64)),
            HeadVariant::PrescaleFull => self.scaling_layer(blocks)?.expect("scaling").scaled_attention(h),
            HeadVariant::SinkOnly { positions } => self
                .scaling_layer(blocks)?
                .expect("scaling")
                .sink_only_attention(h, positions),
        }
    }

    /// Records `1×c` logits for hidden states `h` over the selected blocks.
    /// `attention_override` replaces the head's own class attention.
    pub fn build_logits(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        h: NodeId,
        blocks: &[usize],
        attention_override: Option<&Matrix>,
    ) -> Result<NodeId> {
        self.check_blocks(blocks)?;
        let parts: Vec<NodeId> = blocks.iter().map(|&t| b.id(&block_name(t))).collect();
        let v = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_rows(&parts)
        };
        let c = tape.value(v).rows();
        let n = tape.value(h).rows();
        let scale = 1.0 / (self.dim as f64).sqrt();

        if let Some(a) = attention_override {
            if a.shape() != (c, n) {
                return Err(Error::Shape {
                    op: "attention override",
                    left: (c, n),
                    right: a.shape(),
                });
            }
        }
        let (attention, source) = match (&self.variant, attention_override) {
            (_, Some(a)) => (tape.constant(a.clone()), h),
            (HeadVariant::RegularCls, None) => {
                let cls = tape.select_rows(h, &[0]);
                return Ok(tape.matmul_t(cls, v));
            }
            (HeadVariant::Uniform, None) => (tape.constant(Matrix::filled(c, n, 1.0 / n as f64)), h),
            (HeadVariant::PrescaleFull, None) => {
                let fh = tape.matmul(h, b.id("f.w"));
                let fh = tape.add_row(fh, b.id("f.b"));
                let scores = tape.matmul_t(v, fh);
                let scores = tape.scale(scores, scale);
                (tape.row_softmax(scores), h)
            }
            (HeadVariant::SinkOnly { positions }, None) => {
                let support = valid_positions(positions, n)?;
                let hs = tape.select_rows(h, &support);
                let fh = tape.matmul(hs, b.id("f.w"));
                let fh = tape.add_row(fh, b.id("f.b"));
                let scores = tape.matmul_t(v, fh);
                let scores = tape.scale(scores, scale);
                (tape.row_softmax(scores), hs)
            }
        };
        let mixed = tape.matmul(attention, source);
        let weighted = tape.hadamard(mixed, v);
        let col = tape.row_sums(weighted);
        Ok(tape.transpose(col))
    }
}

/// One labeled token sequence; `label` indexes the classes of the blocks it
/// is scored against.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSequence {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub probe_lr: f64,
    pub probe_epochs: usize,
    pub finetune_lr: f64,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            probe_lr: 5e-4,
            probe_epochs: 5,
            finetune_lr: 2e-5,
            finetune_epochs: 3,
            batch_size: 16,
            optimizer: Optimizer::default(),
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.probe_lr >= 0.0 && self.finetune_lr >= 0.0 && self.probe_lr.is_finite() && self.finetune_lr.is_finite()) {
            return Err(Error::InvalidArgument("learning rates must be finite and ≥ 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Keep,
    Drop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedEvaluation {
    pub accuracy: f64,
    /// Attention rows that lost all their mass and fell back to uniform.
    pub degenerate_rows: usize,
}

/// Encoder plus class head.
#[derive(Clone, Debug)]
pub struct ClassifierModel {
    pub encoder: TransformerEncoder,
    pub head: ClassHead,
}

impl ClassifierModel {
    pub fn new(encoder: TransformerEncoder, variant: HeadVariant) -> Result<Self> {
        let head = ClassHead::new(variant, encoder.config().model_dim)?;
        Ok(Self { encoder, head })
    }

    /// Logits over `blocks` and the number of degenerate attention rows.
    pub fn logits_with_options(
        &self,
        tokens: &[usize],
        blocks: &[usize],
        opts: &ForwardOptions,
    ) -> Result<(Vec<f64>, usize)> {
        let mut tape = Tape::new();
        let eb = self.encoder.params().bind_constant(&mut tape);
        let hb = self.head.params().bind_constant(&mut tape);
        let nodes = self.encoder.build(&mut tape, &eb, tokens, opts)?;
        let logits = self.head.build_logits(&mut tape, &hb, nodes.output, blocks, None)?;
        Ok((tape.value(logits).data().to_vec(), tape.degenerate_rows()))
    }

    pub fn logits(&self, tokens: &[usize], blocks: &[usize]) -> Result<Vec<f64>> {
        Ok(self.logits_with_options(tokens, blocks, &ForwardOptions::default())?.0)
    }

    pub fn predict(&self, tokens: &[usize], blocks: &[usize]) -> Result<usize> {
        Ok(argmax(&self.logits(tokens, blocks)?))
    }

    pub fn probabilities(&self, tokens: &[usize], blocks: &[usize]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(tokens, blocks)?))
    }

    /// Accuracy with `label + label_offset` as the target index over `blocks`.
    pub fn accuracy(&self, data: &[LabeledSequence], blocks: &[usize], label_offset: usize) -> Result<f64> {
        Ok(self
            .evaluate_with_sink_mask(data, blocks, label_offset, &[], MaskMode::Keep)?
            .accuracy)
    }

    /// Accuracy with attention to `positions` either kept or removed in every
    /// encoder layer and head.
    pub fn evaluate_with_sink_mask(
        &self,
        data: &[LabeledSequence],
        blocks: &[usize],
        label_offset: usize,
        positions: &[usize],
        mode: MaskMode,
    ) -> Result<MaskedEvaluation> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("no evaluation data".into()));
        }
        let opts = ForwardOptions {
            dropped_positions: match mode {
                MaskMode::Keep => Vec::new(),
                MaskMode::Drop => positions.to_vec(),
            },
            ..ForwardOptions::default()
        };
        let mut correct = 0usize;
        let mut degenerate_rows = 0;
        for ex in data {
            let (logits, degenerate) = self.logits_with_options(&ex.tokens, blocks, &opts)?;
            degenerate_rows += degenerate;
            if argmax(&logits) == ex.label + label_offset {
                correct += 1;
            }
        }
        Ok(MaskedEvaluation {
            accuracy: correct as f64 / data.len() as f64,
            degenerate_rows,
        })
    }

    fn check_labels(&self, data: &[LabeledSequence], blocks: &[usize]) -> Result<()> {
        self.head.check_blocks(blocks)?;
        let classes: usize = blocks.iter().map(|&t| self.head.task_classes[t]).sum();
        if let Some(ex) = data.iter().find(|e| e.label >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {} out of range for {classes} classes",
                ex.label
            )));
        }
        Ok(())
    }

    /// Trains the head on `blocks` with the encoder frozen. Encoder outputs
    /// are computed once and reused across epochs.
    pub fn probe_stage<R: Rng + ?Sized>(
        &mut self,
        data: &[LabeledSequence],
        blocks: &[usize],
        cfg: &StageConfig,
        rng: &mut R,
    ) -> Result<StageReport> {
        cfg.validate()?;
        if !self.encoder.params().all_frozen() {
            return Err(Error::Contract("probe stage requires a frozen encoder".into()));
        }
        self.check_labels(data, blocks)?;
        let hidden: Vec<Matrix> = data
            .iter()
            .map(|ex| self.encoder.forward(&ex.tokens, &ForwardOptions::default()))
            .collect::<Result<_>>()?;
        self.head.params.reset_optimizer_state();
        let trainable = head_trainable(blocks);
        let mut report = StageReport::default();
        let mut order: Vec<usize> = (0..data.len()).collect();
        for _ in 0..cfg.probe_epochs {
            order.shuffle(rng);
            let mut total = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(cfg.batch_size) {
                let mut tape = Tape::new();
                let hb = self.head.params.bind_only(&mut tape, &trainable);
                let mut logits = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let h = tape.constant(hidden[i].clone());
                    logits.push(self.head.build_logits(&mut tape, &hb, h, blocks, None)?);
                }
                let stacked = stack(&mut tape, &logits);
                let targets: Vec<usize> = chunk.iter().map(|&i| data[i].label).collect();
                let loss = tape.cross_entropy(stacked, &targets);
                total += tape.value(loss).item();
                batches += 1;
                let grads = tape.backward(loss)?;
                self.head.params.step(&hb.gradients(&grads), cfg.probe_lr, cfg.optimizer)?;
                report.steps += 1;
            }
            report.epoch_losses.push(total / batches.max(1) as f64);
        }
        Ok(report)
    }

    /// Trains every unfrozen encoder parameter together with the head on
    /// `blocks`; the loss covers only those blocks' classes.
    pub fn finetune_stage<R: Rng + ?Sized>(
        &mut self,
        data: &[LabeledSequence],
        blocks: &[usize],
        cfg: &StageConfig,
        rng: &mut R,
    ) -> Result<StageReport> {
        cfg.validate()?;
        self.check_labels(data, blocks)?;
        self.encoder.params_mut().reset_optimizer_state();
        self.head.params.reset_optimizer_state();
        let trainable = head_trainable(blocks);
        let opts = ForwardOptions::default();
        let mut report = StageReport::default();
        let mut order: Vec<usize> = (0..data.len()).collect();
        for _ in 0..cfg.finetune_epochs {
            order.shuffle(rng);
            let mut total = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(cfg.batch_size) {
                let mut tape = Tape::new();
                let eb = self.encoder.params().bind(&mut tape);
                let hb = self.head.params.bind_only(&mut tape, &trainable);
                let mut logits = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let nodes = self.encoder.build(&mut tape, &eb, &data[i].tokens, &opts)?;
                    logits.push(self.head.build_logits(&mut tape, &hb, nodes.output, blocks, None)?);
                }
                let stacked = stack(&mut tape, &logits);
                let targets: Vec<usize> = chunk.iter().map(|&i| data[i].label).collect();
                let loss = tape.cross_entropy(stacked, &targets);
                total += tape.value(loss).item();
                batches += 1;
                let grads = tape.backward(loss)?;
                self.encoder
                    .params_mut()
                    .step(&eb.gradients(&grads), cfg.finetune_lr, cfg.optimizer)?;
                self.head.params.step(&hb.gradients(&grads), cfg.finetune_lr, cfg.optimizer)?;
                report.steps += 1;
            }
            report.epoch_losses.push(total / batches.max(1) as f64);
        }
        Ok(report)
    }
}

fn head_trainable(blocks: &[usize]) -> impl Fn(&str) -> bool {
    let names: Vec<String> = blocks.iter().map(|&t| block_name(t)).collect();
    move |name: &str| name.starts_with("f.") || names.iter().any(|n| n == name)
}

fn stack(tape: &mut Tape, rows: &[NodeId]) -> NodeId {
    if rows.len() == 1 {
        rows[0]
    } else {
        tape.concat_rows(rows)
    }
}

/// Regular-head logits next to scaling-head logits with the class attention
/// forced one-hot on the first position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub regular_logits: Vec<f64>,
    pub onehot_logits: Vec<f64>,
    pub max_abs_diff: f64,
}

pub fn cls_onehot_equivalence(
    encoder: &TransformerEncoder,
    head: &ClassHead,
    tokens: &[usize],
    blocks: &[usize],
) -> Result<EquivalenceReport> {
    if head.variant != HeadVariant::RegularCls {
        return Err(Error::InvalidArgument("equivalence check needs a regular head".into()));
    }
    let mut scaled = ClassHead::new(HeadVariant::PrescaleFull, head.dim)?;
    for (name, m) in head.params.iter() {
        scaled.params.insert(name, m.clone());
    }
    scaled.task_classes = head.task_classes.clone();

    let mut tape = Tape::new();
    let eb = encoder.params().bind_constant(&mut tape);
    let nodes = encoder.build(&mut tape, &eb, tokens, &ForwardOptions::default())?;
    let rb = head.params.bind_constant(&mut tape);
    let regular = head.build_logits(&mut tape, &rb, nodes.output, blocks, None)?;
    let c = tape.value(regular).cols();
    let onehot = Matrix::from_fn(c, tokens.len(), |_, j| if j == 0 { 1.0 } else { 0.0 });
    let sb = scaled.params.bind_constant(&mut tape);
    let forced = scaled.build_logits(&mut tape, &sb, nodes.output, blocks, Some(&onehot))?;

    let regular_logits = tape.value(regular).data().to_vec();
    let onehot_logits = tape.value(forced).data().to_vec();
    let max_abs_diff = regular_logits
        .iter()
        .zip(&onehot_logits)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(EquivalenceReport {
        regular_logits,
        onehot_logits,
        max_abs_diff,
    })
}

/// One class row of a class-to-token attention heatmap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapEntry {
    pub class_label: String,
    pub tokens: Vec<String>,
    pub token_ids: Vec<usize>,
    pub attention: Vec<f64>,
}

pub fn class_attention_heatmap(
    model: &ClassifierModel,
    tokens: &[usize],
    blocks: &[usize],
) -> Result<Vec<HeatmapEntry>> {
    let h = model.encoder.forward(tokens, &ForwardOptions::default())?;
    let a = model.head.attention(&h, blocks)?;
    let strings = model.encoder.token_strings(tokens);
    let mut labels = Vec::new();
    for &t in blocks {
        for c in 0..model.head.task_classes[t] {
            labels.push(format!("task{t}/class{c}"));
        }
    }
    Ok(labels
        .into_iter()
        .enumerate()
        .map(|(i, class_label)| HeatmapEntry {
            class_label,
            tokens: strings.clone(),
            token_ids: tokens.to_vec(),
            attention: a.row(i).to_vec(),
        })
        .collect())
}
