//! Command implementations. Each takes a resolved config (or explicit
//! paths), performs the work, and leaves its artifacts under the run
//! directory. The binary and the integration tests call these directly.

use std::cell::RefCell;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use selfmem_core::corpus::{generate_synthetic, Datastore, SyntheticTaskSpec, Vocabulary};
use selfmem_core::generator::GeneratorCheckpoint;
use selfmem_core::metrics::{delta_sentence, freq_bucket_f1, spearman};
use selfmem_core::pipeline::{
    ablate_memory, primal_correlation, run_selfmem, strip_specials, AblationMode, FinalReport,
    IterationRow, IterationState,
};
use selfmem_core::retrieval::{assign_memory, InvertedIndex, MemoryMode};
use selfmem_core::selector::{SelectorCheckpoint, SelectorExample};

use crate::config::{RetrievalParams, RunConfig};
use crate::error::CliError;
use crate::formats::{self, CorrelationRecord, IterationMeta, PoolRecord};

/// File layout of a run directory.
pub struct RunPaths {
    root: PathBuf,
}

impl RunPaths {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn index(&self) -> PathBuf {
        self.root.join("index.json")
    }

    pub fn generator(&self) -> PathBuf {
        self.root.join("checkpoints").join("generator.ckpt")
    }

    pub fn selector(&self) -> PathBuf {
        self.root.join("checkpoints").join("selector.ckpt")
    }

    /// Train-split pools decoded for selector training.
    pub fn selector_pools(&self) -> PathBuf {
        self.root.join("pools.train.jsonl")
    }

    fn iterations_dir(&self) -> PathBuf {
        self.root.join("iterations")
    }

    pub fn iter_meta(&self, k: usize) -> PathBuf {
        self.iterations_dir().join(format!("iter-{k:03}.meta.json"))
    }

    pub fn iter_pools(&self, k: usize, split: &str) -> PathBuf {
        self.iterations_dir().join(format!("iter-{k:03}.{split}.pools.jsonl"))
    }

    pub fn iter_selections(&self, k: usize, split: &str) -> PathBuf {
        self.iterations_dir().join(format!("iter-{k:03}.{split}.selections.jsonl"))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn final_report(&self) -> PathBuf {
        self.report_dir().join("final_report.json")
    }

    pub fn correlation_jsonl(&self) -> PathBuf {
        self.report_dir().join("correlation.jsonl")
    }

    pub fn iterations_csv(&self) -> PathBuf {
        self.report_dir().join("iterations.csv")
    }

    pub fn summary_csv(&self) -> PathBuf {
        self.report_dir().join("summary.csv")
    }

    pub fn correlation_csv(&self) -> PathBuf {
        self.report_dir().join("correlation.csv")
    }

    pub fn freq_f1_csv(&self) -> PathBuf {
        self.report_dir().join("freq_f1.csv")
    }

    pub fn ablation_csv(&self) -> PathBuf {
        self.report_dir().join("ablation.csv")
    }
}

/// Load the corpus directory named by the config, or synthesize one.
pub fn obtain_corpus(cfg: &RunConfig) -> Result<(Datastore, Datastore, Datastore), CliError> {
    match &cfg.corpus_dir {
        Some(dir) => {
            let (_, train, valid, test) = formats::load_corpus(dir)?;
            Ok((train, valid, test))
        }
        None => Ok(generate_synthetic(cfg.task.clone())?),
    }
}

fn build_index(train: &Datastore, params: &RetrievalParams) -> InvertedIndex {
    InvertedIndex::build_with_params(train, params.k1, params.b)
}

fn train_generator(
    cfg: &RunConfig,
    train: &Datastore,
    valid: &Datastore,
    index: &InvertedIndex,
) -> Result<GeneratorCheckpoint, CliError> {
    let train_mem = assign_memory(train, index, train, MemoryMode::Retrieved)?;
    let valid_mem = assign_memory(valid, index, train, MemoryMode::Retrieved)?;
    let gen = GeneratorCheckpoint::train(
        train,
        &train_mem,
        valid,
        &valid_mem,
        cfg.generator.clone(),
        &cfg.gen_train,
    )?;
    info!(
        "generator trained: {} epochs, best valid loss {:.6} at epoch {}",
        gen.meta.epochs_run, gen.meta.best_valid_loss, gen.meta.best_epoch
    );
    Ok(gen)
}

/// Reuse the run's generator checkpoint when it matches the config,
/// otherwise train one and save it.
fn ensure_generator(
    cfg: &RunConfig,
    paths: &RunPaths,
    train: &Datastore,
    valid: &Datastore,
    index: &InvertedIndex,
) -> Result<GeneratorCheckpoint, CliError> {
    let path = paths.generator();
    if path.is_file() {
        let gen = formats::load_generator(&path)?;
        if gen.config != cfg.generator {
            return Err(CliError::config(format!(
                "{} was trained with a different generator configuration",
                path.display()
            )));
        }
        if gen.vocab_size != train.vocabulary.len() {
            return Err(CliError::config(format!(
                "{} expects vocabulary size {}, corpus has {}",
                path.display(),
                gen.vocab_size,
                train.vocabulary.len()
            )));
        }
        info!("reusing generator checkpoint {}", path.display());
        return Ok(gen);
    }
    let gen = train_generator(cfg, train, valid, index)?;
    formats::save_generator(&path, &gen)?;
    Ok(gen)
}

// ── Subcommands ──

/// Generate a synthetic corpus from a task spec file.
pub fn cmd_synth(spec_path: &Path, out_dir: &Path) -> Result<(), CliError> {
    let spec: SyntheticTaskSpec = formats::read_json(spec_path)?;
    let (train, valid, test) = generate_synthetic(spec.clone())?;
    formats::save_corpus(out_dir, &spec, &train, &valid, &test)?;
    info!(
        "corpus written to {}: {}/{}/{} pairs, vocabulary {}",
        out_dir.display(),
        train.pairs.len(),
        valid.pairs.len(),
        test.pairs.len(),
        train.vocabulary.len()
    );
    Ok(())
}

/// Build the retrieval index over a corpus directory.
pub fn cmd_index(
    corpus_dir: &Path,
    out_dir: &Path,
    params: &RetrievalParams,
) -> Result<(), CliError> {
    params.validate()?;
    let (spec, train, _, _) = formats::load_corpus(corpus_dir)?;
    let index = build_index(&train, params);
    fs::create_dir_all(out_dir)?;
    let path = out_dir.join("index.json");
    formats::save_index(&path, spec.seed, &index)?;
    info!(
        "index written to {}: {} documents, {} terms",
        path.display(),
        index.n_docs(),
        index.postings().len()
    );
    Ok(())
}

/// Train the retrieval-augmented generator and save its checkpoint.
pub fn cmd_train_gen(cfg: &RunConfig) -> Result<(), CliError> {
    let paths = RunPaths::new(&cfg.out_dir);
    cfg.save_effective(&cfg.out_dir)?;
    let (train, valid, _) = obtain_corpus(cfg)?;
    let index = build_index(&train, &cfg.retrieval);
    formats::save_index(&paths.index(), cfg.seed, &index)?;
    let gen = train_generator(cfg, &train, &valid, &index)?;
    formats::save_generator(&paths.generator(), &gen)?;
    Ok(())
}

/// Decode candidate pools over the selector-training subset of the train
/// split, using retrieval memory.
pub fn cmd_pool(cfg: &RunConfig) -> Result<(), CliError> {
    let paths = RunPaths::new(&cfg.out_dir);
    cfg.save_effective(&cfg.out_dir)?;
    let (train, valid, _) = obtain_corpus(cfg)?;
    let index = build_index(&train, &cfg.retrieval);
    let gen = ensure_generator(cfg, &paths, &train, &valid, &index)?;
    let memories = assign_memory(&train, &index, &train, MemoryMode::Retrieved)?;
    let vocab = &train.vocabulary;
    let count = cfg.selector_pool_count.min(train.pairs.len());
    let mut pools = Vec::with_capacity(count);
    for (pair, mem) in train.pairs.iter().zip(&memories).take(count) {
        let x = vocab.encode(&pair.source);
        let m = vocab.encode(&mem.memory);
        pools.push(gen.decode_pool(&pair.id, &x, &m)?);
    }
    let records = formats::pool_records(cfg.seed, 0, "train", &pools, vocab);
    formats::write_jsonl(&paths.selector_pools(), &records)?;
    info!("{} pools ({} candidates) written to {}", pools.len(), records.len(), paths.selector_pools().display());
    Ok(())
}

/// Train the memory selector on previously decoded train-split pools.
pub fn cmd_train_sel(cfg: &RunConfig) -> Result<(), CliError> {
    let paths = RunPaths::new(&cfg.out_dir);
    cfg.save_effective(&cfg.out_dir)?;
    let (train, _, _) = obtain_corpus(cfg)?;
    let pool_path = paths.selector_pools();
    if !pool_path.is_file() {
        return Err(CliError::io(format!(
            "{} not found; run the pool command first",
            pool_path.display()
        )));
    }
    let records: Vec<PoolRecord> = formats::read_jsonl(&pool_path)?;
    let pools = formats::pools_from_records(&records)?;
    let vocab = &train.vocabulary;
    let examples = pools
        .iter()
        .map(|pool| {
            let pair = train
                .pairs
                .iter()
                .find(|p| p.id == pool.source_id)
                .ok_or_else(|| {
                    CliError::config(format!(
                        "pool source {} is not in the train split",
                        pool.source_id
                    ))
                })?;
            let candidates: Vec<Vec<u32>> =
                pool.candidates.iter().map(|c| strip_specials(&c.tokens)).collect();
            let deltas = pool
                .candidates
                .iter()
                .map(|c| {
                    delta_sentence(
                        cfg.selector.delta,
                        &vocab.decode(&strip_specials(&c.tokens)),
                        &pair.target,
                    )
                    .map_err(|e| CliError::stage("train-selector", e.to_string()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(SelectorExample {
                source_id: pair.id.clone(),
                x: vocab.encode(&pair.source),
                candidates,
                deltas,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let sel =
        SelectorCheckpoint::train(&examples, cfg.selector.clone(), vocab.len(), &cfg.sel_train)?;
    info!(
        "selector trained on {} pools: {} epochs, held-out delta {:.6}",
        examples.len(),
        sel.meta.epochs_run,
        sel.meta.best_heldout_delta
    );
    formats::save_selector(&paths.selector(), &sel)?;
    Ok(())
}

fn persist_iteration(
    paths: &RunPaths,
    seed: u64,
    vocab: &Vocabulary,
    state: &IterationState,
) -> Result<(), CliError> {
    let k = state.iteration;
    let meta = IterationMeta {
        seed,
        iteration: k,
        converged: state.converged,
        valid_score: state.valid.hypothesis_score,
        test_score: state.test.hypothesis_score,
        valid_stats: state.valid.stats,
        test_stats: state.test.stats,
    };
    formats::write_json_pretty(&paths.iter_meta(k), &meta)?;
    for (split, track) in [("valid", &state.valid), ("test", &state.test)] {
        let pools = formats::pool_records(seed, k, split, &track.pools, vocab);
        formats::write_jsonl(&paths.iter_pools(k, split), &pools)?;
        let selections = formats::selection_records(seed, k, split, &track.memories);
        formats::write_jsonl(&paths.iter_selections(k, split), &selections)?;
    }
    Ok(())
}

/// Run the full select-and-regenerate loop, persist every iteration, and
/// rebuild the report tables.
pub fn cmd_loop(cfg: &RunConfig) -> Result<(), CliError> {
    let paths = RunPaths::new(&cfg.out_dir);
    cfg.save_effective(&cfg.out_dir)?;
    let (train, valid, test) = obtain_corpus(cfg)?;
    let index = build_index(&train, &cfg.retrieval);
    formats::save_index(&paths.index(), cfg.seed, &index)?;
    let vocab = train.vocabulary.clone();
    let seed = cfg.seed;
    let persist_err: RefCell<Option<CliError>> = RefCell::new(None);
    let run = run_selfmem(
        &train,
        &valid,
        &test,
        cfg.generator.clone(),
        cfg.selector.clone(),
        cfg.policy,
        cfg.strategy,
        &cfg.pipeline_options(),
        |state| {
            if persist_err.borrow().is_some() {
                return;
            }
            info!(
                "iteration {}: valid {:.4}, test {:.4}, pool oracle {:.4}",
                state.iteration,
                state.valid.hypothesis_score,
                state.test.hypothesis_score,
                state.valid.stats.oracle
            );
            if let Err(e) = persist_iteration(&paths, seed, &vocab, state) {
                *persist_err.borrow_mut() = Some(e);
            }
        },
    )?;
    if let Some(e) = persist_err.into_inner() {
        return Err(e);
    }
    formats::save_generator(&paths.generator(), &run.generator)?;
    if let Some(sel) = &run.selector {
        formats::save_selector(&paths.selector(), sel)?;
    }
    formats::write_json_pretty(&paths.final_report(), &run.report)?;
    let corr = primal_correlation(&run.generator, &test, &run.states[0].test.memories)?;
    let records: Vec<CorrelationRecord> = test
        .pairs
        .iter()
        .zip(&corr.pairs)
        .map(|(pair, &(memory_bleu, hypothesis_bleu))| CorrelationRecord {
            seed,
            pair_id: pair.id.clone(),
            memory_bleu,
            hypothesis_bleu,
        })
        .collect();
    formats::write_jsonl(&paths.correlation_jsonl(), &records)?;
    write_tables(&cfg.out_dir)?;
    info!(
        "loop finished: {} iterations, baseline {:.4}, final {:.4}",
        run.report.iterations_run, run.report.baseline_score, run.report.final_score
    );
    Ok(())
}

/// Score the generator on the test split under each memory regime.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<(), CliError> {
    let paths = RunPaths::new(&cfg.out_dir);
    cfg.save_effective(&cfg.out_dir)?;
    let (train, valid, test) = obtain_corpus(cfg)?;
    let index = build_index(&train, &cfg.retrieval);
    formats::save_index(&paths.index(), cfg.seed, &index)?;
    let gen = ensure_generator(cfg, &paths, &train, &valid, &index)?;
    let rows = ablate_memory(&gen, &train, &test, &index, &AblationMode::ALL)?;
    for row in &rows {
        info!(
            "ablation {}: memory {:.4}, hypothesis {:.4}",
            row.mode.as_str(),
            row.memory_score,
            row.hypothesis_score
        );
    }
    formats::write_ablation_csv(&paths.ablation_csv(), cfg.seed, &rows)?;
    Ok(())
}

fn read_iteration_metas(paths: &RunPaths) -> Result<Vec<IterationMeta>, CliError> {
    let dir = paths.iterations_dir();
    let entries = fs::read_dir(&dir)
        .map_err(|e| CliError::io(format!("cannot read {}: {e}", dir.display())))?;
    let mut metas = Vec::new();
    for entry in entries {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.starts_with("iter-") && name.ends_with(".meta.json") {
            metas.push(formats::read_json::<IterationMeta>(&path)?);
        }
    }
    metas.sort_by_key(|m| m.iteration);
    if metas.is_empty() {
        return Err(CliError::io(format!(
            "{} holds no iteration metadata; run the loop command first",
            dir.display()
        )));
    }
    for (k, meta) in metas.iter().enumerate() {
        if meta.iteration != k {
            return Err(CliError::config(format!(
                "iteration metadata is not contiguous at {k}"
            )));
        }
    }
    Ok(metas)
}

/// Rebuild every report table from the artifacts persisted in a run
/// directory. Pure function of those files, so rerunning is byte-identical.
pub fn write_tables(run_dir: &Path) -> Result<(), CliError> {
    let paths = RunPaths::new(run_dir);
    let cfg = RunConfig::load(&paths.config())?;
    cfg.validate()?;
    let report: FinalReport = formats::read_json(&paths.final_report())?;
    let metas = read_iteration_metas(&paths)?;
    let rows: Vec<IterationRow> = metas.iter().map(|m| m.to_row()).collect();
    formats::write_iterations_csv(&paths.iterations_csv(), cfg.seed, &rows)?;

    let corr: Vec<CorrelationRecord> = formats::read_jsonl(&paths.correlation_jsonl())?;
    formats::write_correlation_csv(&paths.correlation_csv(), &corr)?;
    let mem: Vec<f64> = corr.iter().map(|r| r.memory_bleu).collect();
    let hyp: Vec<f64> = corr.iter().map(|r| r.hypothesis_bleu).collect();

    let mut entries: Vec<(String, Option<f64>)> = vec![
        ("baseline_score".to_string(), Some(report.baseline_score)),
        ("final_score".to_string(), Some(report.final_score)),
        ("iterations_run".to_string(), Some(report.iterations_run as f64)),
        ("memory_hypothesis_spearman".to_string(), spearman(&mem, &hyp)),
    ];
    for score in &report.test_scores {
        entries.push((format!("test_{}", score.kind), Some(score.value)));
    }
    formats::write_summary_csv(&paths.summary_csv(), cfg.seed, &entries)?;

    let (_, _, test) = obtain_corpus(&cfg)?;
    let refs: Vec<Vec<String>> = test.pairs.iter().map(|p| p.target.clone()).collect();
    let hyps = report
        .test_hypotheses
        .iter()
        .zip(&test.pairs)
        .map(|((id, tokens), pair)| {
            if *id != pair.id {
                return Err(CliError::config(format!(
                    "final report hypothesis {id} does not match test pair {}",
                    pair.id
                )));
            }
            Ok(tokens.clone())
        })
        .collect::<Result<Vec<_>, _>>()?;
    if hyps.len() != refs.len() {
        return Err(CliError::config(format!(
            "final report holds {} hypotheses, test split has {} pairs",
            hyps.len(),
            refs.len()
        )));
    }
    let buckets = freq_bucket_f1(&hyps, &refs, &test.vocabulary, 4);
    formats::write_freq_f1_csv(&paths.freq_f1_csv(), cfg.seed, &buckets)?;
    Ok(())
}

/// Rebuild the report tables for an existing run directory.
pub fn cmd_report(run_dir: &Path) -> Result<(), CliError> {
    write_tables(run_dir)?;
    info!("report tables rebuilt under {}", RunPaths::new(run_dir).report_dir().display());
    Ok(())
}
