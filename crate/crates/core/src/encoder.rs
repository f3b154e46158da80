//! A small post-layer-norm transformer encoder with attention tracing,
//! key-logit sink induction and sink-masked evaluation.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::AttentionMatrix;
use crate::numeric::{Bindings, Matrix, NodeId, Optimizer, ParamStore, Tape};
use crate::rng;
use crate::trace::AttentionTrace;

/// Ids `0..COMMON_TOKENS` are reserved for tokens shared by every task.
pub const COMMON_TOKENS: usize = 4;
pub const LAYER_NORM_EPS: f64 = 1e-12;

const COMMON_LABELS: [&str; COMMON_TOKENS] = ["[CLS]", "[SEP]", ".", "[2ND]"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Added to pre-softmax key logits at `sink_positions` in every layer but
    /// the first.
    pub sink_bias: f64,
    pub sink_positions: Vec<usize>,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            model_dim: 32,
            ff_dim: 64,
            vocab_size: 64,
            max_seq_len: 16,
            sink_bias: 0.0,
            sink_positions: vec![0],
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.ff_dim == 0 || self.max_seq_len == 0 {
            return Err(Error::InvalidArgument("ff_dim and max_seq_len must be positive".into()));
        }
        if self.vocab_size <= COMMON_TOKENS {
            return Err(Error::InvalidArgument(format!(
                "vocab_size must exceed the {COMMON_TOKENS} reserved ids"
            )));
        }
        if !self.sink_bias.is_finite() || self.sink_bias < 0.0 {
            return Err(Error::InvalidArgument("sink_bias must be finite and ≥ 0".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// The last id is the masked-language-model mask token.
    pub fn mask_token(&self) -> usize {
        self.vocab_size - 1
    }
}

/// Per-call switches for the forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardOptions {
    /// Positions whose attention columns are zeroed (rows renormalized)
    /// before value mixing.
    pub dropped_positions: Vec<usize>,
    /// Ignore the configured sink bias.
    pub disable_sink_bias: bool,
}

/// Tape nodes produced by one forward pass.
#[derive(Clone, Debug)]
pub struct EncoderNodes {
    pub output: NodeId,
    /// `[layer][head]` attention probabilities after any masking.
    pub attentions: Vec<Vec<NodeId>>,
    pub hidden: Vec<NodeId>,
}

#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    config: EncoderConfig,
    params: ParamStore,
}

pub fn token_label(id: usize, vocab_size: usize) -> String {
    if id < COMMON_TOKENS {
        COMMON_LABELS[id].to_string()
    } else if id + 1 == vocab_size {
        "[MASK]".to_string()
    } else {
        format!("tok{id}")
    }
}

impl TransformerEncoder {
    /// Randomly initialized encoder drawn from the config seed's init stream.
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(config.seed, rng::INIT);
        let d = config.model_dim;
        let ff = config.ff_dim;
        let mut params = ParamStore::new();
        let w = |r: usize, c: usize, rng: &mut _| Matrix::random_normal(r, c, 1.0 / (r as f64).sqrt(), rng);
        params.insert("embed.token", Matrix::random_normal(config.vocab_size, d, 1.0, &mut rng));
        params.insert("embed.pos", Matrix::random_normal(config.max_seq_len, d, 0.1, &mut rng));
        for l in 0..config.layers {
            for proj in ["q", "k", "v", "o"] {
                params.insert(format!("layer{l}.{proj}.w"), w(d, d, &mut rng));
                params.insert(format!("layer{l}.{proj}.b"), Matrix::zeros(1, d));
            }
            params.insert(format!("layer{l}.ln1.g"), Matrix::filled(1, d, 1.0));
            params.insert(format!("layer{l}.ln1.b"), Matrix::zeros(1, d));
            params.insert(format!("layer{l}.ff1.w"), w(d, ff, &mut rng));
            params.insert(format!("layer{l}.ff1.b"), Matrix::zeros(1, ff));
            params.insert(format!("layer{l}.ff2.w"), w(ff, d, &mut rng));
            params.insert(format!("layer{l}.ff2.b"), Matrix::zeros(1, d));
            params.insert(format!("layer{l}.ln2.g"), Matrix::filled(1, d, 1.0));
            params.insert(format!("layer{l}.ln2.b"), Matrix::zeros(1, d));
        }
        Ok(Self { config, params })
    }

    /// Rebuilds an encoder from stored parameters, checking every shape.
    pub fn from_parts(config: EncoderConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(config.clone())?;
        if reference.params.len() != params.len() {
            return Err(Error::Schema(format!(
                "expected {} encoder tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (name, m) in reference.params.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| Error::Schema(format!("missing encoder tensor {name}")))?;
            if got.shape() != m.shape() {
                return Err(Error::Shape {
                    op: "encoder tensor",
                    left: m.shape(),
                    right: got.shape(),
                });
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_parts(self) -> (EncoderConfig, ParamStore) {
        (self.config, self.params)
    }

    /// Replaces the token embedding table (e.g. with an orthogonal task table).
    pub fn set_token_embeddings(&mut self, table: Matrix) -> Result<()> {
        let current = self.params.get("embed.token").expect("always present");
        if current.shape() != table.shape() {
            return Err(Error::Shape {
                op: "set_token_embeddings",
                left: current.shape(),
                right: table.shape(),
            });
        }
        *self.params.get_mut("embed.token").expect("always present") = table;
        Ok(())
    }

    /// Sets the key-logit sink bias and its positions.
    pub fn induce_sinks(&mut self, beta: f64, positions: &[usize]) -> Result<()> {
        if !beta.is_finite() || beta < 0.0 {
            return Err(Error::InvalidArgument("sink bias must be finite and ≥ 0".into()));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= self.config.max_seq_len) {
            return Err(Error::InvalidArgument(format!(
                "sink position {p} beyond max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        self.config.sink_bias = beta;
        self.config.sink_positions = positions.to_vec();
        Ok(())
    }

    pub fn token_strings(&self, tokens: &[usize]) -> Vec<String> {
        tokens
            .iter()
            .map(|&t| token_label(t, self.config.vocab_size))
            .collect()
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::InvalidArgument(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {t} out of vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Records the forward pass for `tokens` on `tape`.
    pub fn build(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        tokens: &[usize],
        opts: &ForwardOptions,
    ) -> Result<EncoderNodes> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let n = tokens.len();
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let positions: Vec<usize> = (0..n).collect();

        let tok = tape.select_rows(b.id("embed.token"), tokens);
        let pos = tape.select_rows(b.id("embed.pos"), &positions);
        let mut h = tape.add(tok, pos);

        let sink_bias = if cfg.sink_bias != 0.0 && !opts.disable_sink_bias {
            let mut m = Matrix::zeros(n, n);
            for &p in cfg.sink_positions.iter().filter(|&&p| p < n) {
                for i in 0..n {
                    m[(i, p)] = cfg.sink_bias;
                }
            }
            Some(m)
        } else {
            None
        };
        let keep: Option<Vec<bool>> = if opts.dropped_positions.iter().any(|&p| p < n) {
            Some((0..n).map(|j| !opts.dropped_positions.contains(&j)).collect())
        } else {
            None
        };

        let mut attentions = Vec::with_capacity(cfg.layers);
        let mut hidden = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = |name: &str| b.id(&format!("layer{l}.{name}"));
            let affine = |tape: &mut Tape, x: NodeId, w: &str, bias: &str| {
                let y = tape.matmul(x, p(w));
                tape.add_row(y, p(bias))
            };
            let q = affine(tape, h, "q.w", "q.b");
            let k = affine(tape, h, "k.w", "k.b");
            let v = affine(tape, h, "v.w", "v.b");
            let bias = match (&sink_bias, l) {
                (Some(m), l) if l >= 1 => Some(tape.constant(m.clone())),
                _ => None,
            };

            let mut heads = Vec::with_capacity(cfg.heads);
            let mut mixed = Vec::with_capacity(cfg.heads);
            for head in 0..cfg.heads {
                let qh = tape.slice_cols(q, head * dh, dh);
                let kh = tape.slice_cols(k, head * dh, dh);
                let vh = tape.slice_cols(v, head * dh, dh);
                let scores = tape.matmul_t(qh, kh);
                let mut scores = tape.scale(scores, scale);
                if let Some(bias) = bias {
                    scores = tape.add(scores, bias);
                }
                let mut probs = tape.row_softmax(scores);
                if let Some(keep) = &keep {
                    probs = tape.mask_renormalize(probs, keep);
                }
                heads.push(probs);
                mixed.push(tape.matmul(probs, vh));
            }
            let cat = if mixed.len() == 1 {
                mixed[0]
            } else {
                tape.concat_cols(&mixed)
            };
            let attn_out = affine(tape, cat, "o.w", "o.b");
            let res = tape.add(h, attn_out);
            let normed = tape.layer_norm(res, LAYER_NORM_EPS);
            let scaled = tape.mul_row(normed, p("ln1.g"));
            let h1 = tape.add_row(scaled, p("ln1.b"));

            let f = affine(tape, h1, "ff1.w", "ff1.b");
            let f = tape.gelu(f);
            let f = affine(tape, f, "ff2.w", "ff2.b");
            let res = tape.add(h1, f);
            let normed = tape.layer_norm(res, LAYER_NORM_EPS);
            let scaled = tape.mul_row(normed, p("ln2.g"));
            h = tape.add_row(scaled, p("ln2.b"));

            attentions.push(heads);
            hidden.push(h);
        }
        Ok(EncoderNodes {
            output: h,
            attentions,
            hidden,
        })
    }

    /// Final hidden states without building a trace.
    pub fn forward(&self, tokens: &[usize], opts: &ForwardOptions) -> Result<Matrix> {
        let mut tape = Tape::new();
        let b = self.params.bind_constant(&mut tape);
        let nodes = self.build(&mut tape, &b, tokens, opts)?;
        Ok(tape.value(nodes.output).clone())
    }

    pub fn forward_with_trace(&self, tokens: &[usize]) -> Result<(Matrix, AttentionTrace)> {
        self.forward_with_trace_opts(tokens, &ForwardOptions::default())
    }

    pub fn forward_with_trace_opts(
        &self,
        tokens: &[usize],
        opts: &ForwardOptions,
    ) -> Result<(Matrix, AttentionTrace)> {
        let mut tape = Tape::new();
        let b = self.params.bind_constant(&mut tape);
        let nodes = self.build(&mut tape, &b, tokens, opts)?;
        let attentions = nodes
            .attentions
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .map(|id| AttentionMatrix::with_tolerance(tape.value(*id).clone(), 1e-9))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let trace = AttentionTrace {
            model_name: "sinklab-encoder".into(),
            attentions,
            hidden_states: nodes.hidden.iter().map(|id| tape.value(*id).clone()).collect(),
            tokens: self.token_strings(tokens),
            common_positions: common_positions(tokens),
        };
        Ok((tape.value(nodes.output).clone(), trace))
    }

    /// Masked-token prediction on `corpus`. Sink bias is disabled throughout.
    pub fn pretrain_sink_free(&mut self, corpus: &[Vec<usize>], cfg: &PretrainConfig) -> Result<PretrainReport> {
        if corpus.is_empty() {
            return Err(Error::InvalidArgument("empty pretraining corpus".into()));
        }
        for seq in corpus {
            self.check_tokens(seq)?;
        }
        let mut rng = rng::stream(cfg.seed, rng::MASKING);
        let opts = ForwardOptions {
            disable_sink_bias: true,
            ..ForwardOptions::default()
        };
        let mut losses = Vec::with_capacity(cfg.steps);
        let batch = cfg.batch_size.clamp(1, corpus.len());
        let mut cursor = 0;
        for _ in 0..cfg.steps {
            let mut tape = Tape::new();
            let b = self.params.bind(&mut tape);
            let mut total: Option<NodeId> = None;
            for _ in 0..batch {
                let seq = &corpus[cursor % corpus.len()];
                cursor += 1;
                let (input, masked) = mask_sequence(seq, cfg.mask_prob, self.config.mask_token(), &mut rng);
                let l = self.mlm_loss(&mut tape, &b, &input, seq, &masked, &opts)?;
                total = Some(match total {
                    Some(t) => tape.add(t, l),
                    None => l,
                });
            }
            let loss = tape.scale(total.expect("batch ≥ 1"), 1.0 / batch as f64);
            losses.push(tape.value(loss).item());
            let grads = tape.backward(loss)?;
            self.params.step(&b.gradients(&grads), cfg.lr, cfg.optimizer)?;
        }
        let masked_accuracy = self.masked_accuracy(corpus, cfg)?;
        Ok(PretrainReport {
            losses,
            masked_accuracy,
        })
    }

    fn mlm_loss(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        input: &[usize],
        target: &[usize],
        masked: &[usize],
        opts: &ForwardOptions,
    ) -> Result<NodeId> {
        let nodes = self.build(tape, b, input, opts)?;
        let picked = tape.select_rows(nodes.output, masked);
        let logits = tape.matmul_t(picked, b.id("embed.token"));
        let targets: Vec<usize> = masked.iter().map(|&i| target[i]).collect();
        Ok(tape.cross_entropy(logits, &targets))
    }

    /// Fraction of masked positions recovered, using a fixed masking of every
    /// corpus sequence drawn from the data stream of `cfg.seed`.
    pub fn masked_accuracy(&self, corpus: &[Vec<usize>], cfg: &PretrainConfig) -> Result<f64> {
        let mut rng = rng::stream(cfg.seed, rng::DATA);
        let opts = ForwardOptions {
            disable_sink_bias: true,
            ..ForwardOptions::default()
        };
        let table = self.params.get("embed.token").expect("always present");
        let (mut hits, mut total) = (0usize, 0usize);
        for seq in corpus {
            let (input, masked) = mask_sequence(seq, cfg.mask_prob, self.config.mask_token(), &mut rng);
            let h = self.forward(&input, &opts)?;
            let logits = h.select_rows(&masked).matmul_t(table);
            for (r, &pos) in masked.iter().enumerate() {
                let row = logits.row(r);
                if argmax(row) == seq[pos] {
                    hits += 1;
                }
                total += 1;
            }
        }
        Ok(hits as f64 / total as f64)
    }
}

/// Positions holding one of the reserved common ids.
pub fn common_positions(tokens: &[usize]) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .filter(|(_, &t)| t < COMMON_TOKENS)
        .map(|(i, _)| i)
        .collect()
}

/// First index of the maximum; ties go to the lower index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Replaces a random `prob` fraction of positions (at least one) with the
/// mask id. Returns the corrupted input and the sorted masked positions.
fn mask_sequence<R: Rng>(seq: &[usize], prob: f64, mask: usize, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let count = ((seq.len() as f64 * prob).round() as usize).clamp(1, seq.len());
    let mut masked = sample(rng, seq.len(), count).into_vec();
    masked.sort_unstable();
    let mut input = seq.to_vec();
    for &i in &masked {
        input[i] = mask;
    }
    (input, masked)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub mask_prob: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 1e-3,
            batch_size: 8,
            mask_prob: 0.15,
            optimizer: Optimizer::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Batch loss before each update.
    pub losses: Vec<f64>,
    pub masked_accuracy: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EncoderConfig {
        EncoderConfig {
            model_dim: 16,
            ff_dim: 32,
            vocab_size: 24,
            max_seq_len: 8,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn zero_layers_is_embedding_plus_position() {
        let enc = TransformerEncoder::new(EncoderConfig {
            layers: 0,
            ..small()
        })
        .unwrap();
        let tokens = [0, 5, 7];
        let (h, trace) = enc.forward_with_trace(&tokens).unwrap();
        let e = enc.params().get("embed.token").unwrap().select_rows(&tokens);
        let p = enc.params().get("embed.pos").unwrap().select_rows(&[0, 1, 2]);
        assert_eq!(h, e.add(&p));
        assert_eq!(trace.layer_count(), 0);
    }

    #[test]
    fn single_token_attention_is_one() {
        let enc = TransformerEncoder::new(small()).unwrap();
        let (_, trace) = enc.forward_with_trace(&[9]).unwrap();
        for layer in &trace.attentions {
            for a in layer {
                assert_eq!(a.matrix().data(), &[1.0]);
            }
        }
    }

    #[test]
    fn rejects_bad_tokens() {
        let enc = TransformerEncoder::new(small()).unwrap();
        assert!(enc.forward_with_trace(&[24]).is_err());
        assert!(enc.forward_with_trace(&[4; 9]).is_err());
        assert!(enc.forward_with_trace(&[]).is_err());
    }

    #[test]
    fn rejects_indivisible_heads() {
        assert!(TransformerEncoder::new(EncoderConfig {
            heads: 3,
            ..small()
        })
        .is_err());
    }

    #[test]
    fn zero_bias_is_bitwise_identity() {
        let mut enc = TransformerEncoder::new(small()).unwrap();
        let tokens = [0, 1, 6, 9, 11, 2];
        let before = enc.forward(&tokens, &ForwardOptions::default()).unwrap();
        enc.induce_sinks(0.0, &[0, 1]).unwrap();
        let after = enc.forward(&tokens, &ForwardOptions::default()).unwrap();
        assert_eq!(before.data(), after.data());
    }

    #[test]
    fn dropping_nothing_matches_keep() {
        let enc = TransformerEncoder::new(small()).unwrap();
        let tokens = [4, 5, 6];
        let keep = enc.forward(&tokens, &ForwardOptions::default()).unwrap();
        let drop = enc
            .forward(
                &tokens,
                &ForwardOptions {
                    dropped_positions: vec![7],
                    ..ForwardOptions::default()
                },
            )
            .unwrap();
        assert_eq!(keep.data(), drop.data());
    }

    #[test]
    fn dropped_columns_are_zero_and_rows_stochastic() {
        let enc = TransformerEncoder::new(small()).unwrap();
        let opts = ForwardOptions {
            dropped_positions: vec![0, 2],
            ..ForwardOptions::default()
        };
        let (_, trace) = enc.forward_with_trace_opts(&[0, 5, 2, 7, 8], &opts).unwrap();
        for layer in &trace.attentions {
            for a in layer {
                for i in 0..5 {
                    assert_eq!(a.matrix()[(i, 0)], 0.0);
                    assert_eq!(a.matrix()[(i, 2)], 0.0);
                    assert!((a.matrix().row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn steps_zero_leaves_encoder_unchanged() {
        let mut enc = TransformerEncoder::new(small()).unwrap();
        let before = enc.params().checksum();
        let cfg = PretrainConfig {
            steps: 0,
            ..PretrainConfig::default()
        };
        enc.pretrain_sink_free(&[vec![4, 5, 6]], &cfg).unwrap();
        assert_eq!(enc.params().checksum(), before);
        assert!(enc.pretrain_sink_free(&[], &cfg).is_err());
    }

    #[test]
    fn argmax_prefers_lower_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
