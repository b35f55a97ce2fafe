//! On-disk artifact formats. Records are JSONL, tables are CSV with a
//! header row, checkpoints are a JSON header line followed by raw
//! little-endian f32 tensor blocks in parameter visit order. Every artifact
//! carries the run seed, either as a field or as a leading CSV column.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use selfmem_core::corpus::{Datastore, Split, SyntheticTaskSpec, TextPair, Vocabulary};
use selfmem_core::generator::{CandidatePool, GeneratorCheckpoint, GeneratorParams, TrainMeta};
use selfmem_core::generator::GeneratorConfig;
use selfmem_core::metrics::BucketF1;
use selfmem_core::nn::ParamCollection;
use selfmem_core::pipeline::{AblationRow, IterationRow, PoolStats};
use selfmem_core::retrieval::{InvertedIndex, MemoryAssignment, Provenance};
use selfmem_core::rng;
use selfmem_core::selector::{
    SelectorCheckpoint, SelectorConfig, SelectorParams, SelectorTrainMeta,
};

use crate::error::CliError;

// ── Generic JSON / JSONL ──

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("invalid json in {}: {e}", path.display())))
}

pub fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::config(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text)
        .map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let file = File::create(path)
        .map_err(|e| CliError::io(format!("cannot create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| CliError::config(format!("cannot serialize record: {e}")))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let file = File::open(path)
        .map_err(|e| CliError::io(format!("cannot read {}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| {
            CliError::config(format!("invalid record at {}:{}: {e}", path.display(), n + 1))
        })?;
        out.push(record);
    }
    Ok(out)
}

// ── Corpus ──

/// Persisted vocabulary: token list plus train-split frequencies.
#[derive(Serialize, Deserialize)]
struct VocabFile {
    seed: u64,
    tokens: Vec<String>,
    freqs: Vec<u64>,
}

pub fn save_corpus(
    dir: &Path,
    spec: &SyntheticTaskSpec,
    train: &Datastore,
    valid: &Datastore,
    test: &Datastore,
) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    write_json_pretty(&dir.join("task.json"), spec)?;
    let vocab = VocabFile {
        seed: spec.seed,
        tokens: train.vocabulary.tokens().to_vec(),
        freqs: train.vocabulary.freqs().to_vec(),
    };
    write_json_pretty(&dir.join("vocab.json"), &vocab)?;
    write_jsonl(&dir.join("train.jsonl"), &train.pairs)?;
    write_jsonl(&dir.join("valid.jsonl"), &valid.pairs)?;
    write_jsonl(&dir.join("test.jsonl"), &test.pairs)?;
    Ok(())
}

pub fn load_corpus(
    dir: &Path,
) -> Result<(SyntheticTaskSpec, Datastore, Datastore, Datastore), CliError> {
    let spec: SyntheticTaskSpec = read_json(&dir.join("task.json"))?;
    let vocab_file: VocabFile = read_json(&dir.join("vocab.json"))?;
    let vocab = Vocabulary::from_parts(vocab_file.tokens, vocab_file.freqs);
    let split = |name: &str, split: Split| -> Result<Datastore, CliError> {
        let pairs: Vec<TextPair> = read_jsonl(&dir.join(name))?;
        Datastore::new(pairs, split, vocab.clone())
            .map_err(|e| CliError::config(format!("corpus {name}: {e}")))
    };
    Ok((
        spec,
        split("train.jsonl", Split::Train)?,
        split("valid.jsonl", Split::Valid)?,
        split("test.jsonl", Split::Test)?,
    ))
}

// ── Retrieval index ──

#[derive(Serialize, Deserialize)]
struct IndexFile {
    seed: u64,
    k1: f64,
    b: f64,
    doc_ids: Vec<String>,
    doc_lens: Vec<u32>,
    postings: std::collections::BTreeMap<String, Vec<(u32, u32)>>,
}

pub fn save_index(path: &Path, seed: u64, index: &InvertedIndex) -> Result<(), CliError> {
    let file = IndexFile {
        seed,
        k1: index.k1(),
        b: index.b(),
        doc_ids: index.doc_ids().to_vec(),
        doc_lens: index.doc_lens().to_vec(),
        postings: index.postings().clone().into_iter().collect(),
    };
    write_json_pretty(path, &file)
}

pub fn load_index(path: &Path) -> Result<(u64, InvertedIndex), CliError> {
    let file: IndexFile = read_json(path)?;
    let index = InvertedIndex::from_parts(
        file.k1,
        file.b,
        file.doc_ids,
        file.doc_lens,
        file.postings.into_iter().collect(),
    );
    Ok((file.seed, index))
}

// ── Checkpoints ──

#[derive(Serialize, Deserialize)]
struct TensorSpec {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct GeneratorHeader {
    kind: String,
    config: GeneratorConfig,
    vocab_size: usize,
    meta: TrainMeta,
    tensors: Vec<TensorSpec>,
}

#[derive(Serialize, Deserialize)]
struct SelectorHeader {
    kind: String,
    config: SelectorConfig,
    vocab_size: usize,
    meta: SelectorTrainMeta,
    tensors: Vec<TensorSpec>,
}

fn tensor_specs<P: ParamCollection>(params: &P) -> Vec<TensorSpec> {
    params
        .tensor_specs()
        .into_iter()
        .map(|(name, rows, cols)| TensorSpec { name, rows, cols })
        .collect()
}

fn write_checkpoint<P: ParamCollection>(
    path: &Path,
    header_json: String,
    params: &P,
) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let file = File::create(path)
        .map_err(|e| CliError::io(format!("cannot create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{header_json}")?;
    let mut io_err: Option<std::io::Error> = None;
    params.visit(&mut |_, m| {
        if io_err.is_some() {
            return;
        }
        for &v in &m.data {
            if let Err(e) = w.write_all(&(v as f32).to_le_bytes()) {
                io_err = Some(e);
                return;
            }
        }
    });
    if let Some(e) = io_err {
        return Err(e.into());
    }
    w.flush()?;
    Ok(())
}

/// Fill `params` from the byte cursor, verifying each tensor against the
/// header spec. Returns the number of bytes consumed.
fn read_tensors<P: ParamCollection>(
    params: &mut P,
    specs: &[TensorSpec],
    bytes: &[u8],
    path: &Path,
) -> Result<usize, CliError> {
    let mut cursor = 0usize;
    let mut tensor_ix = 0usize;
    let mut error: Option<String> = None;
    params.visit_mut(&mut |name, m| {
        if error.is_some() {
            return;
        }
        let Some(spec) = specs.get(tensor_ix) else {
            error = Some(format!("tensor {name} missing from header"));
            return;
        };
        if spec.name != name || spec.rows != m.rows || spec.cols != m.cols {
            error = Some(format!(
                "tensor mismatch: header {} [{}x{}], expected {} [{}x{}]",
                spec.name, spec.rows, spec.cols, name, m.rows, m.cols
            ));
            return;
        }
        let need = m.rows * m.cols * 4;
        if cursor + need > bytes.len() {
            error = Some(format!("tensor {name} truncated"));
            return;
        }
        for v in m.data.iter_mut() {
            let raw: [u8; 4] = bytes[cursor..cursor + 4].try_into().expect("4 bytes");
            *v = f32::from_le_bytes(raw) as f64;
            cursor += 4;
        }
        tensor_ix += 1;
    });
    if let Some(msg) = error {
        return Err(CliError::config(format!("{}: {msg}", path.display())));
    }
    if tensor_ix != specs.len() {
        return Err(CliError::config(format!(
            "{}: header lists {} tensors, parameters hold {tensor_ix}",
            path.display(),
            specs.len()
        )));
    }
    if cursor != bytes.len() {
        return Err(CliError::config(format!(
            "{}: {} trailing bytes after tensors",
            path.display(),
            bytes.len() - cursor
        )));
    }
    Ok(cursor)
}

fn split_header(path: &Path) -> Result<(String, Vec<u8>), CliError> {
    let mut file = File::open(path)
        .map_err(|e| CliError::io(format!("cannot read {}: {e}", path.display())))?;
    let mut raw = Vec::new();
    file.read_to_end(&mut raw)?;
    let nl = raw
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CliError::config(format!("{}: missing header line", path.display())))?;
    let header = String::from_utf8(raw[..nl].to_vec())
        .map_err(|_| CliError::config(format!("{}: header is not utf-8", path.display())))?;
    Ok((header, raw[nl + 1..].to_vec()))
}

pub fn save_generator(path: &Path, ckpt: &GeneratorCheckpoint) -> Result<(), CliError> {
    let header = GeneratorHeader {
        kind: "generator".to_string(),
        config: ckpt.config.clone(),
        vocab_size: ckpt.vocab_size,
        meta: ckpt.meta.clone(),
        tensors: tensor_specs(&ckpt.params),
    };
    let json = serde_json::to_string(&header)
        .map_err(|e| CliError::config(format!("cannot serialize header: {e}")))?;
    write_checkpoint(path, json, &ckpt.params)
}

pub fn load_generator(path: &Path) -> Result<GeneratorCheckpoint, CliError> {
    let (header_json, bytes) = split_header(path)?;
    let header: GeneratorHeader = serde_json::from_str(&header_json)
        .map_err(|e| CliError::config(format!("{}: bad header: {e}", path.display())))?;
    if header.kind != "generator" {
        return Err(CliError::config(format!(
            "{}: expected a generator checkpoint, found {}",
            path.display(),
            header.kind
        )));
    }
    // Build correctly shaped parameters, then overwrite every value.
    let mut scratch = rng::stream(0, "checkpoint-load");
    let mut params = GeneratorParams::init(&header.config, header.vocab_size, &mut scratch);
    read_tensors(&mut params, &header.tensors, &bytes, path)?;
    GeneratorCheckpoint::from_parts(header.config, header.vocab_size, params, header.meta)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

pub fn save_selector(path: &Path, ckpt: &SelectorCheckpoint) -> Result<(), CliError> {
    let header = SelectorHeader {
        kind: "selector".to_string(),
        config: ckpt.config.clone(),
        vocab_size: ckpt.vocab_size,
        meta: ckpt.meta.clone(),
        tensors: tensor_specs(&ckpt.params),
    };
    let json = serde_json::to_string(&header)
        .map_err(|e| CliError::config(format!("cannot serialize header: {e}")))?;
    write_checkpoint(path, json, &ckpt.params)
}

pub fn load_selector(path: &Path) -> Result<SelectorCheckpoint, CliError> {
    let (header_json, bytes) = split_header(path)?;
    let header: SelectorHeader = serde_json::from_str(&header_json)
        .map_err(|e| CliError::config(format!("{}: bad header: {e}", path.display())))?;
    if header.kind != "selector" {
        return Err(CliError::config(format!(
            "{}: expected a selector checkpoint, found {}",
            path.display(),
            header.kind
        )));
    }
    let mut scratch = rng::stream(0, "checkpoint-load");
    let mut params = SelectorParams::init(&header.config, header.vocab_size, &mut scratch);
    read_tensors(&mut params, &header.tensors, &bytes, path)?;
    SelectorCheckpoint::from_parts(header.config, header.vocab_size, params, header.meta)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

// ── Pools, selections, iteration metadata ──

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolRecord {
    pub seed: u64,
    pub iteration: usize,
    pub split: String,
    pub source_id: String,
    pub rank: usize,
    pub tokens: Vec<u32>,
    pub text: Vec<String>,
    pub total_logprob: f64,
    pub per_token_logprobs: Vec<f64>,
    pub finished: bool,
}

pub fn pool_records(
    seed: u64,
    iteration: usize,
    split: &str,
    pools: &[CandidatePool],
    vocab: &Vocabulary,
) -> Vec<PoolRecord> {
    let mut out = Vec::new();
    for pool in pools {
        for (rank, c) in pool.candidates.iter().enumerate() {
            out.push(PoolRecord {
                seed,
                iteration,
                split: split.to_string(),
                source_id: pool.source_id.clone(),
                rank,
                tokens: c.tokens.clone(),
                text: vocab.decode(&selfmem_core::pipeline::strip_specials(&c.tokens)),
                total_logprob: c.total_logprob,
                per_token_logprobs: c.per_token_logprobs.clone(),
                finished: c.finished,
            });
        }
    }
    out
}

/// Rebuild candidate pools from persisted records, preserving rank order.
pub fn pools_from_records(records: &[PoolRecord]) -> Result<Vec<CandidatePool>, CliError> {
    use selfmem_core::decode::Hypothesis;
    let mut out: Vec<CandidatePool> = Vec::new();
    for r in records {
        if out.last().map(|p: &CandidatePool| p.source_id != r.source_id).unwrap_or(true) {
            out.push(CandidatePool { source_id: r.source_id.clone(), candidates: Vec::new() });
        }
        let pool = out.last_mut().expect("just pushed");
        if pool.candidates.len() != r.rank {
            return Err(CliError::config(format!(
                "pool records for {} are not rank-contiguous",
                r.source_id
            )));
        }
        pool.candidates.push(Hypothesis {
            tokens: r.tokens.clone(),
            total_logprob: r.total_logprob,
            per_token_logprobs: r.per_token_logprobs.clone(),
            finished: r.finished,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub seed: u64,
    pub iteration: usize,
    pub split: String,
    pub pair_id: String,
    pub memory: Vec<String>,
    pub provenance: Provenance,
}

pub fn selection_records(
    seed: u64,
    iteration: usize,
    split: &str,
    memories: &[MemoryAssignment],
) -> Vec<SelectionRecord> {
    memories
        .iter()
        .map(|m| SelectionRecord {
            seed,
            iteration,
            split: split.to_string(),
            pair_id: m.pair_id.clone(),
            memory: m.memory.clone(),
            provenance: m.provenance.clone(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMeta {
    pub seed: u64,
    pub iteration: usize,
    pub converged: bool,
    pub valid_score: f64,
    pub test_score: f64,
    pub valid_stats: PoolStats,
    pub test_stats: PoolStats,
}

impl IterationMeta {
    pub fn to_row(&self) -> IterationRow {
        IterationRow {
            iteration: self.iteration,
            valid_score: self.valid_score,
            test_score: self.test_score,
            pool_min: self.valid_stats.min,
            pool_q1: self.valid_stats.q1,
            pool_mean: self.valid_stats.mean,
            pool_q3: self.valid_stats.q3,
            pool_oracle: self.valid_stats.oracle,
            converged: self.converged,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRecord {
    pub seed: u64,
    pub pair_id: String,
    pub memory_bleu: f64,
    pub hypothesis_bleu: f64,
}

// ── CSV tables ──

fn csv_writer(path: &Path) -> Result<csv::Writer<File>, CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let file = File::create(path)
        .map_err(|e| CliError::io(format!("cannot create {}: {e}", path.display())))?;
    Ok(csv::Writer::from_writer(file))
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

pub fn write_iterations_csv(
    path: &Path,
    seed: u64,
    rows: &[IterationRow],
) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "seed",
        "iteration",
        "valid_score",
        "test_score",
        "pool_min",
        "pool_q1",
        "pool_mean",
        "pool_q3",
        "pool_oracle",
        "converged",
    ])
    .map_err(|e| CliError::io(e.to_string()))?;
    for r in rows {
        w.write_record([
            seed.to_string(),
            r.iteration.to_string(),
            fmt(r.valid_score),
            fmt(r.test_score),
            fmt(r.pool_min),
            fmt(r.pool_q1),
            fmt(r.pool_mean),
            fmt(r.pool_q3),
            fmt(r.pool_oracle),
            r.converged.to_string(),
        ])
        .map_err(|e| CliError::io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ablation_csv(path: &Path, seed: u64, rows: &[AblationRow]) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    w.write_record(["seed", "mode", "memory_score", "hypothesis_score"])
        .map_err(|e| CliError::io(e.to_string()))?;
    for r in rows {
        w.write_record([
            seed.to_string(),
            r.mode.as_str().to_string(),
            fmt(r.memory_score),
            fmt(r.hypothesis_score),
        ])
        .map_err(|e| CliError::io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv(
    path: &Path,
    seed: u64,
    entries: &[(String, Option<f64>)],
) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    w.write_record(["seed", "metric", "value"]).map_err(|e| CliError::io(e.to_string()))?;
    for (metric, value) in entries {
        w.write_record([seed.to_string(), metric.clone(), fmt_opt(*value)])
            .map_err(|e| CliError::io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_correlation_csv(path: &Path, records: &[CorrelationRecord]) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    w.write_record(["seed", "pair_id", "memory_bleu", "hypothesis_bleu"])
        .map_err(|e| CliError::io(e.to_string()))?;
    for r in records {
        w.write_record([
            r.seed.to_string(),
            r.pair_id.clone(),
            fmt(r.memory_bleu),
            fmt(r.hypothesis_bleu),
        ])
        .map_err(|e| CliError::io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_freq_f1_csv(path: &Path, seed: u64, buckets: &[BucketF1]) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "seed",
        "bucket",
        "min_freq",
        "max_freq",
        "f1",
        "hyp_tokens",
        "ref_tokens",
    ])
    .map_err(|e| CliError::io(e.to_string()))?;
    for b in buckets {
        w.write_record([
            seed.to_string(),
            b.label.clone(),
            b.min_freq.to_string(),
            b.max_freq.to_string(),
            fmt_opt(b.f1),
            b.hyp_tokens.to_string(),
            b.ref_tokens.to_string(),
        ])
        .map_err(|e| CliError::io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use selfmem_core::corpus::generate_synthetic;
    use selfmem_core::generator::{Architecture, TrainOptions};
    use selfmem_core::retrieval::{assign_memory, MemoryMode};
    use selfmem_core::selector::{SelectorExample, SelectorTrainOptions};

    fn tiny_spec() -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            template_count: 4,
            lexicon_size: 40,
            pairs_per_split: (48, 8, 8),
            slot_count_range: (2, 3),
            noise_rate: 0.0,
            seed: 17,
        }
    }

    fn tiny_gen_config() -> GeneratorConfig {
        GeneratorConfig {
            architecture: Architecture::Joint,
            layers: 1,
            model_dim: 16,
            heads: 2,
            ff_dim: 32,
            dropout: 0.1,
            max_len: 24,
            beam_width: 4,
            candidate_count: 4,
            seed: 17,
        }
    }

    #[test]
    fn corpus_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec();
        let (train, valid, test) = generate_synthetic(spec.clone()).unwrap();
        save_corpus(dir.path(), &spec, &train, &valid, &test).unwrap();
        let (spec2, train2, valid2, test2) = load_corpus(dir.path()).unwrap();
        assert_eq!(spec2, spec);
        assert_eq!(train2, train);
        assert_eq!(valid2, valid);
        assert_eq!(test2, test);
    }

    #[test]
    fn index_round_trips_exactly() {
        let (train, _, _) = generate_synthetic(tiny_spec()).unwrap();
        let index = InvertedIndex::build_with_params(&train, 1.4, 0.6);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.json");
        save_index(&path, 17, &index).unwrap();
        let (seed, back) = load_index(&path).unwrap();
        assert_eq!(seed, 17);
        assert_eq!(back, index);
    }

    #[test]
    fn generator_checkpoint_round_trips_bit_exactly() {
        let (train, valid, _) = generate_synthetic(tiny_spec()).unwrap();
        let index = InvertedIndex::build(&train);
        let tm = assign_memory(&train, &index, &train, MemoryMode::Retrieved).unwrap();
        let vm = assign_memory(&valid, &index, &train, MemoryMode::Retrieved).unwrap();
        let gen = GeneratorCheckpoint::train(
            &train,
            &tm,
            &valid,
            &vm,
            tiny_gen_config(),
            &TrainOptions { max_epochs: 1, ..TrainOptions::default() },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("generator.ckpt");
        save_generator(&path, &gen).unwrap();
        let back = load_generator(&path).unwrap();
        assert_eq!(back.config, gen.config);
        assert_eq!(back.vocab_size, gen.vocab_size);
        assert_eq!(back.meta, gen.meta);
        assert_eq!(back.params, gen.params, "trained weights survive the f32 file exactly");
    }

    #[test]
    fn selector_checkpoint_round_trips_bit_exactly() {
        let examples: Vec<SelectorExample> = (0..12)
            .map(|i| SelectorExample {
                source_id: format!("s{i}"),
                x: vec![5, 6, 7],
                candidates: vec![vec![5, 6, 7], vec![8, 9]],
                deltas: vec![80.0, 10.0],
            })
            .collect();
        let config = selfmem_core::selector::SelectorConfig {
            layers: 1,
            model_dim: 16,
            heads: 2,
            ff_dim: 32,
            max_len: 24,
            ..selfmem_core::selector::SelectorConfig::default()
        };
        let sel = SelectorCheckpoint::train(
            &examples,
            config,
            16,
            &SelectorTrainOptions {
                max_epochs: 2,
                heldout_fraction: 0.25,
                ..SelectorTrainOptions::default()
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("selector.ckpt");
        save_selector(&path, &sel).unwrap();
        let back = load_selector(&path).unwrap();
        assert_eq!(back.config, sel.config);
        assert_eq!(back.meta, sel.meta);
        assert_eq!(back.params, sel.params);
    }

    #[test]
    fn checkpoint_kinds_do_not_cross_load() {
        let (train, valid, _) = generate_synthetic(tiny_spec()).unwrap();
        let index = InvertedIndex::build(&train);
        let tm = assign_memory(&train, &index, &train, MemoryMode::Retrieved).unwrap();
        let vm = assign_memory(&valid, &index, &train, MemoryMode::Retrieved).unwrap();
        let gen = GeneratorCheckpoint::train(
            &train,
            &tm,
            &valid,
            &vm,
            tiny_gen_config(),
            &TrainOptions { max_epochs: 1, ..TrainOptions::default() },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("generator.ckpt");
        save_generator(&path, &gen).unwrap();
        let err = load_selector(&path).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let (train, valid, _) = generate_synthetic(tiny_spec()).unwrap();
        let index = InvertedIndex::build(&train);
        let tm = assign_memory(&train, &index, &train, MemoryMode::Retrieved).unwrap();
        let vm = assign_memory(&valid, &index, &train, MemoryMode::Retrieved).unwrap();
        let gen = GeneratorCheckpoint::train(
            &train,
            &tm,
            &valid,
            &vm,
            tiny_gen_config(),
            &TrainOptions { max_epochs: 1, ..TrainOptions::default() },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("generator.ckpt");
        save_generator(&path, &gen).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(load_generator(&path).is_err());
    }

    #[test]
    fn pool_records_round_trip() {
        use selfmem_core::decode::Hypothesis;
        let pairs = vec![TextPair {
            id: "p0".to_string(),
            source: vec!["a".to_string()],
            target: vec!["b".to_string()],
            template_id: None,
        }];
        let vocab = Vocabulary::build(&pairs);
        let pools = vec![CandidatePool {
            source_id: "p0".to_string(),
            candidates: vec![
                Hypothesis {
                    tokens: vocab.encode(&["b".to_string()]),
                    total_logprob: -0.5,
                    per_token_logprobs: vec![-0.5],
                    finished: true,
                },
                Hypothesis {
                    tokens: vocab.encode(&["a".to_string()]),
                    total_logprob: -1.5,
                    per_token_logprobs: vec![-1.5],
                    finished: false,
                },
            ],
        }];
        let records = pool_records(17, 0, "valid", &pools, &vocab);
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].rank, 0);
        assert_eq!(records[1].rank, 1);
        assert!(records.iter().all(|r| r.seed == 17));
        let back = pools_from_records(&records).unwrap();
        assert_eq!(back, pools);
    }

    #[test]
    fn csv_floats_are_fixed_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("summary.csv");
        write_summary_csv(
            &path,
            17,
            &[("bleu".to_string(), Some(58.123456789)), ("spearman".to_string(), None)],
        )
        .unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("seed,metric,value"));
        assert_eq!(lines.next(), Some("17,bleu,58.123457"));
        assert_eq!(lines.next(), Some("17,spearman,"));
    }
}
