//! File formats: attention trace dumps, embedding tables, experiment
//! configs, model checkpoints and CSV/JSON reports. Every write goes through
//! a temporary file in the target directory followed by a rename.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::case_study::{SweepRow, SweepSummary};
use crate::cl::{ExperimentConfig, ExperimentReport};
use crate::encoder::{EncoderConfig, TransformerEncoder};
use crate::error::{Error, Result};
use crate::metrics::{common_token_ratio, head_layer_average, layer_rows, AttentionMatrix, LayerRow};
use crate::numeric::{Matrix, ParamStore};
use crate::prescale::{ClassHead, ClassifierModel, HeadVariant};
use crate::trace::AttentionTrace;

pub const TRACE_FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
/// Largest row-sum error accepted (and renormalized away) when loading dumps.
pub const DUMP_ROW_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format_version: u32,
    pub model_name: String,
    pub layer_count: usize,
    pub head_count: usize,
    pub token_count: usize,
    pub token_strings: Vec<String>,
    pub common_token_positions: Vec<usize>,
}

/// On-disk form of an [`AttentionTrace`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceDump {
    pub header: TraceHeader,
    /// `[layer][head][query][key]`.
    pub attentions: Vec<Vec<Vec<Vec<f64>>>>,
    /// `[layer][token][feature]`; may be empty.
    #[serde(default)]
    pub hidden_states: Vec<Vec<Vec<f64>>>,
}

impl TraceDump {
    pub fn from_trace(trace: &AttentionTrace) -> Self {
        Self {
            header: TraceHeader {
                format_version: TRACE_FORMAT_VERSION,
                model_name: trace.model_name.clone(),
                layer_count: trace.layer_count(),
                head_count: trace.head_count(),
                token_count: trace.token_count(),
                token_strings: trace.tokens.clone(),
                common_token_positions: trace.common_positions.clone(),
            },
            attentions: trace
                .attentions
                .iter()
                .map(|layer| layer.iter().map(|a| a.matrix().to_rows()).collect())
                .collect(),
            hidden_states: trace.hidden_states.iter().map(Matrix::to_rows).collect(),
        }
    }

    /// Checks declared shapes, rejects rows off by more than
    /// [`DUMP_ROW_TOLERANCE`] and renormalizes the rest.
    pub fn into_trace(self) -> Result<AttentionTrace> {
        let h = &self.header;
        if h.format_version != TRACE_FORMAT_VERSION {
            return Err(Error::Schema(format!("unsupported format_version {}", h.format_version)));
        }
        let n = h.token_count;
        if h.token_strings.len() != n {
            return Err(Error::Schema(format!(
                "{} token strings for token_count {n}",
                h.token_strings.len()
            )));
        }
        if self.attentions.len() != h.layer_count {
            return Err(Error::Schema(format!(
                "{} attention layers, header declares {}",
                self.attentions.len(),
                h.layer_count
            )));
        }
        let mut attentions = Vec::with_capacity(h.layer_count);
        for (l, layer) in self.attentions.into_iter().enumerate() {
            if layer.len() != h.head_count {
                return Err(Error::Schema(format!(
                    "layer {l} has {} heads, header declares {}",
                    layer.len(),
                    h.head_count
                )));
            }
            let mut heads = Vec::with_capacity(layer.len());
            for (hd, rows) in layer.into_iter().enumerate() {
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(Error::Schema(format!("layer {l} head {hd} is not {n}x{n}")));
                }
                let m = Matrix::from_rows(&rows)?;
                let a = AttentionMatrix::with_tolerance(m, DUMP_ROW_TOLERANCE).map_err(|e| match e {
                    Error::NotStochastic { row, reason } => Error::NotStochastic {
                        row,
                        reason: format!("layer {l} head {hd}: {reason}"),
                    },
                    other => other,
                })?;
                heads.push(a);
            }
            attentions.push(heads);
        }
        let mut hidden_states = Vec::with_capacity(self.hidden_states.len());
        for (l, rows) in self.hidden_states.into_iter().enumerate() {
            let width = rows.first().map_or(0, Vec::len);
            if rows.len() != n || rows.iter().any(|r| r.len() != width) {
                return Err(Error::Schema(format!("hidden state {l} is not {n} rows of equal width")));
            }
            let m = Matrix::from_rows(&rows)?;
            if !m.is_finite() {
                return Err(Error::NonFinite("hidden state in dump"));
            }
            hidden_states.push(m);
        }
        let trace = AttentionTrace {
            model_name: self.header.model_name,
            attentions,
            hidden_states,
            tokens: self.header.token_strings,
            common_positions: self.header.common_token_positions,
        };
        trace.validate()?;
        Ok(trace)
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn save_trace(path: impl AsRef<Path>, trace: &AttentionTrace) -> Result<()> {
    write_json(path, &TraceDump::from_trace(trace))
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<AttentionTrace> {
    let dump: TraceDump = serde_json::from_str(&read(path.as_ref())?)?;
    dump.into_trace()
}

/// One dump, or every `*.json` file of a directory in name order.
pub fn load_traces(path: impl AsRef<Path>) -> Result<Vec<(PathBuf, AttentionTrace)>> {
    let path = path.as_ref();
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::InvalidArgument(format!("no .json dumps in {}", path.display())));
        }
        files
            .into_iter()
            .map(|f| load_trace(&f).map(|t| (f, t)))
            .collect()
    } else {
        Ok(vec![(path.to_path_buf(), load_trace(path)?)])
    }
}

/// Token embedding table exported from a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingDump {
    pub format_version: u32,
    pub model_name: String,
    pub tokens: Vec<String>,
    pub embeddings: Vec<Vec<f64>>,
    #[serde(default)]
    pub special_token_ids: Vec<usize>,
}

impl EmbeddingDump {
    pub fn matrix(&self) -> Result<Matrix> {
        if self.tokens.len() != self.embeddings.len() {
            return Err(Error::Schema(format!(
                "{} tokens for {} embedding rows",
                self.tokens.len(),
                self.embeddings.len()
            )));
        }
        let width = self.embeddings.first().map_or(0, Vec::len);
        if self.embeddings.iter().any(|r| r.len() != width) {
            return Err(Error::Schema("embedding rows differ in width".into()));
        }
        let m = Matrix::from_rows(&self.embeddings)?;
        if !m.is_finite() {
            return Err(Error::NonFinite("embedding table"));
        }
        Ok(m)
    }
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingDump> {
    let dump: EmbeddingDump = serde_json::from_str(&read(path.as_ref())?)?;
    dump.matrix()?;
    Ok(dump)
}

/// Parses TOML (`.toml`) or JSON (anything else, falling back to TOML).
pub fn load_config<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = read(path)?;
    if path.extension().is_some_and(|x| x == "toml") {
        return Ok(toml::from_str(&text)?);
    }
    match serde_json::from_str(&text) {
        Ok(v) => Ok(v),
        Err(json_err) => toml::from_str(&text).map_err(|_| Error::Json(json_err)),
    }
}

pub fn load_experiment_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = load_config(path)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Writes `bytes` to a temporary sibling of `path`, then renames it over
/// `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut builder = tempfile::Builder::new();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        builder.permissions(fs::Permissions::from_mode(0o644));
    }
    let mut tmp = builder.tempfile_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    write_atomic(path, &to_json(value)?)
}

/// CSV with a header row from any list of flat serializable records.
pub fn to_csv<T: Serialize>(rows: &[T], header: &[&str]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::io("<csv buffer>", e.into_error()))
}

pub const LAYER_COLUMNS: [&str; 9] = [
    "layer",
    "head_count",
    "top1_degree",
    "top3_degree",
    "top5_degree",
    "top1_deviation",
    "cosine_similarity",
    "lambda_max",
    "bound_rhs",
];

pub const SWEEP_COLUMNS: [&str; 7] = [
    "sink_degree",
    "deviation_scale",
    "seed",
    "interference",
    "s1s2",
    "r1r2",
    "cross_terms",
];

pub const SWEEP_SUMMARY_COLUMNS: [&str; 7] = [
    "sink_degree",
    "deviation_scale",
    "seeds",
    "mean_abs_interference",
    "mean_abs_s1s2",
    "mean_abs_r1r2",
    "mean_abs_cross_terms",
];

pub fn sweep_csv(rows: &[SweepRow]) -> Result<Vec<u8>> {
    to_csv(rows, &SWEEP_COLUMNS)
}

pub fn sweep_summary_csv(rows: &[SweepSummary]) -> Result<Vec<u8>> {
    to_csv(rows, &SWEEP_SUMMARY_COLUMNS)
}

#[derive(Serialize)]
struct AccuracyRecord<'a> {
    strategy: &'a str,
    seed: u64,
    mode: &'a str,
    task: usize,
    boundary: usize,
    accuracy: f64,
}

/// `strategy, seed, mode, task, boundary, accuracy`; `boundary` is the index
/// of the last task trained when the accuracy was measured.
pub fn accuracy_csv(report: &ExperimentReport) -> Result<Vec<u8>> {
    let mut rows = Vec::new();
    for r in &report.reports {
        for run in &r.runs {
            for (mode, matrix) in [("task_aware", &run.task_aware), ("task_agnostic", &run.task_agnostic)] {
                for (t, row) in matrix.rows.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        if let Some(accuracy) = v {
                            rows.push(AccuracyRecord {
                                strategy: r.strategy.name(),
                                seed: run.seed,
                                mode,
                                task: j,
                                boundary: t,
                                accuracy: *accuracy,
                            });
                        }
                    }
                }
            }
        }
    }
    to_csv(&rows, &["strategy", "seed", "mode", "task", "boundary", "accuracy"])
}

#[derive(Serialize)]
struct BoundaryRecord<'a> {
    strategy: &'a str,
    seed: u64,
    boundary: usize,
    similarity: f64,
    top1_deviation: f64,
    top5_deviation: f64,
    top1_degree: f64,
    sink_deviation: f64,
}

pub fn boundary_csv(report: &ExperimentReport) -> Result<Vec<u8>> {
    let mut rows = Vec::new();
    for r in &report.reports {
        for run in &r.runs {
            for b in &run.boundaries {
                rows.push(BoundaryRecord {
                    strategy: r.strategy.name(),
                    seed: run.seed,
                    boundary: b.boundary,
                    similarity: b.similarity,
                    top1_deviation: b.top1_deviation,
                    top5_deviation: b.top5_deviation,
                    top1_degree: b.top1_degree,
                    sink_deviation: b.sink_deviation,
                });
            }
        }
    }
    to_csv(
        &rows,
        &[
            "strategy",
            "seed",
            "boundary",
            "similarity",
            "top1_deviation",
            "top5_deviation",
            "top1_degree",
            "sink_deviation",
        ],
    )
}

/// Writes `report.json`, `accuracy.csv` and `boundaries.csv` into `dir`.
pub fn write_experiment(dir: impl AsRef<Path>, report: &ExperimentReport) -> Result<()> {
    let dir = dir.as_ref();
    write_json(dir.join("report.json"), report)?;
    write_atomic(dir.join("accuracy.csv"), &accuracy_csv(report)?)?;
    write_atomic(dir.join("boundaries.csv"), &boundary_csv(report)?)?;
    Ok(())
}

/// Head-averaged attention of one layer, for plotting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerHeatmap {
    pub source: String,
    pub layer: usize,
    pub tokens: Vec<String>,
    pub attention: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpSummary {
    pub source: String,
    pub model_name: String,
    pub token_count: usize,
    /// Top-1 token per layer (head-averaged degree).
    pub top1_tokens: Vec<String>,
    pub common_token_ratio: f64,
    pub layers: Vec<LayerRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    /// Layer rows averaged over all dumps.
    pub layers: Vec<LayerRow>,
    pub dumps: Vec<DumpSummary>,
    pub heatmaps: Vec<LayerHeatmap>,
}

/// Per-layer sink metrics and bounds for each trace, then averaged.
pub fn analyze(traces: &[(String, AttentionTrace)]) -> Result<Analysis> {
    if traces.is_empty() {
        return Err(Error::InvalidArgument("nothing to analyze".into()));
    }
    let mut dumps = Vec::with_capacity(traces.len());
    let mut heatmaps = Vec::new();
    for (source, trace) in traces {
        let rows = layer_rows(trace)?;
        let stats = head_layer_average(trace)?;
        for (l, layer) in trace.attentions.iter().enumerate() {
            heatmaps.push(LayerHeatmap {
                source: source.clone(),
                layer: l,
                tokens: trace.tokens.clone(),
                attention: AttentionMatrix::mean_of(layer)?.matrix().to_rows(),
            });
        }
        dumps.push(DumpSummary {
            source: source.clone(),
            model_name: trace.model_name.clone(),
            token_count: trace.token_count(),
            top1_tokens: stats.iter().map(|s| trace.tokens[s.top1()].clone()).collect(),
            common_token_ratio: common_token_ratio(&stats, &trace.common_positions),
            layers: rows,
        });
    }
    let layer_count = dumps[0].layers.len();
    if dumps.iter().any(|d| d.layers.len() != layer_count) {
        return Err(Error::Schema("dumps disagree on layer count".into()));
    }
    let layers = (0..layer_count)
        .map(|l| {
            let rows: Vec<&LayerRow> = dumps.iter().map(|d| &d.layers[l]).collect();
            let m = |f: fn(&LayerRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64;
            let cos: Vec<f64> = rows.iter().filter_map(|r| r.cosine_similarity).collect();
            LayerRow {
                layer: l,
                head_count: rows[0].head_count,
                top1_degree: m(|r| r.top1_degree),
                top3_degree: m(|r| r.top3_degree),
                top5_degree: m(|r| r.top5_degree),
                top1_deviation: m(|r| r.top1_deviation),
                cosine_similarity: (!cos.is_empty()).then(|| cos.iter().sum::<f64>() / cos.len() as f64),
                lambda_max: m(|r| r.lambda_max),
                bound_rhs: m(|r| r.bound_rhs),
            }
        })
        .collect();
    Ok(Analysis {
        layers,
        dumps,
        heatmaps,
    })
}

/// Writes `layers.csv`, `heatmap.json` and `summary.json` into `dir`.
pub fn write_analysis(dir: impl AsRef<Path>, analysis: &Analysis) -> Result<()> {
    let dir = dir.as_ref();
    write_atomic(dir.join("layers.csv"), &to_csv(&analysis.layers, &LAYER_COLUMNS)?)?;
    write_json(dir.join("heatmap.json"), &analysis.heatmaps)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        layers: &'a [LayerRow],
        dumps: &'a [DumpSummary],
    }
    write_json(
        dir.join("summary.json"),
        &Summary {
            layers: &analysis.layers,
            dumps: &analysis.dumps,
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: String,
    rows: usize,
    cols: usize,
    /// In units of 8-byte values from the start of the blob.
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct HeadHeader {
    variant: HeadVariant,
    dim: usize,
    task_classes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    encoder: EncoderConfig,
    head: HeadHeader,
    tensors: Vec<TensorEntry>,
}

/// `u64` header length (little-endian), JSON header, then every tensor as
/// little-endian `f64` in header order.
pub fn checkpoint_bytes(model: &ClassifierModel) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    let mut offset = 0;
    for (group, store) in [("encoder", model.encoder.params()), ("head", model.head.params())] {
        for (name, m) in store.iter() {
            tensors.push(TensorEntry {
                name: name.to_string(),
                group: group.to_string(),
                rows: m.rows(),
                cols: m.cols(),
                offset,
            });
            offset += m.data().len();
            for v in m.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let header = CheckpointHeader {
        format_version: CHECKPOINT_FORMAT_VERSION,
        encoder: model.encoder.config().clone(),
        head: HeadHeader {
            variant: model.head.variant().clone(),
            dim: model.head.dim(),
            task_classes: model.head.task_classes().to_vec(),
        },
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + blob.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ClassifierModel> {
    let corrupt = |what: &str| Error::Schema(format!("corrupt checkpoint: {what}"));
    let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(|| corrupt("missing header length"))?.try_into().expect("8 bytes");
    let header_len = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| corrupt("header length"))?;
    let header_end = 8usize.checked_add(header_len).ok_or_else(|| corrupt("header length"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(bytes.get(8..header_end).ok_or_else(|| corrupt("truncated header"))?)?;
    if header.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Schema(format!(
            "unsupported checkpoint format_version {}",
            header.format_version
        )));
    }
    let blob = &bytes[header_end..];
    let mut encoder_params = ParamStore::new();
    let mut head_params = ParamStore::new();
    for t in &header.tensors {
        let count = t.rows * t.cols;
        let start = t.offset * 8;
        let raw = blob
            .get(start..start + count * 8)
            .ok_or_else(|| corrupt(&format!("tensor {} out of range", t.name)))?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let m = Matrix::from_vec(t.rows, t.cols, data)?;
        if !m.is_finite() {
            return Err(Error::NonFinite("checkpoint tensor"));
        }
        match t.group.as_str() {
            "encoder" => encoder_params.insert(t.name.clone(), m),
            "head" => head_params.insert(t.name.clone(), m),
            other => return Err(corrupt(&format!("unknown tensor group {other}"))),
        }
    }
    let encoder = TransformerEncoder::from_parts(header.encoder, encoder_params)?;
    let head = ClassHead::from_parts(header.head.variant, header.head.dim, header.head.task_classes, head_params)?;
    Ok(ClassifierModel { encoder, head })
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &ClassifierModel) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(model)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ClassifierModel> {
    let path = path.as_ref();
    checkpoint_from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_dump() -> TraceDump {
        TraceDump {
            header: TraceHeader {
                format_version: 1,
                model_name: "m".into(),
                layer_count: 1,
                head_count: 1,
                token_count: 1,
                token_strings: vec!["[CLS]".into()],
                common_token_positions: vec![0],
            },
            attentions: vec![vec![vec![vec![1.0]]]],
            hidden_states: vec![],
        }
    }

    #[test]
    fn minimal_dump_loads() {
        let t = minimal_dump().into_trace().unwrap();
        assert_eq!(t.attentions[0][0].matrix().data(), &[1.0]);
    }

    #[test]
    fn rows_off_by_more_than_tolerance_are_rejected_with_row() {
        let mut d = minimal_dump();
        d.header.token_count = 2;
        d.header.token_strings = vec!["a".into(), "b".into()];
        d.attentions = vec![vec![vec![vec![0.5, 0.5], vec![0.6, 0.5]]]];
        match d.into_trace().unwrap_err() {
            Error::NotStochastic { row, .. } => assert_eq!(row, 1),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn small_row_errors_are_renormalized() {
        let mut d = minimal_dump();
        d.header.token_count = 2;
        d.header.token_strings = vec!["a".into(), "b".into()];
        d.attentions = vec![vec![vec![vec![0.5, 0.5004], vec![0.25, 0.75]]]];
        let t = d.into_trace().unwrap();
        let row: f64 = t.attentions[0][0].matrix().row(0).iter().sum();
        assert!((row - 1.0).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_a_schema_error() {
        let mut d = minimal_dump();
        d.header.head_count = 2;
        assert!(matches!(d.into_trace(), Err(Error::Schema(_))));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        assert!(matches!(load_trace("/nonexistent/dump.json"), Err(Error::Io { .. })));
    }

    #[test]
    fn csv_has_header_row() {
        let bytes = to_csv::<SweepRow>(&[], &SWEEP_COLUMNS).unwrap();
        assert_eq!(String::from_utf8(bytes).unwrap().trim(), SWEEP_COLUMNS.join(","));
    }
}
