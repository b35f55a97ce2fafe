//! End-to-end orchestration: retrieve memory, train the generator, train the
//! selector on candidate pools, then iterate select-and-regenerate until the
//! validation score stops improving. Also the memory ablation table and the
//! memory-quality/output-quality correlation diagnostic.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{Datastore, Vocabulary, BOS_ID, EOS_ID, PAD_ID, SEP_ID};
use crate::generator::{
    CandidatePool, GeneratorCheckpoint, GeneratorConfig, TrainOptions,
};
use crate::metrics::{self, DeltaKind, ScoreReport};
use crate::retrieval::{
    assign_memory, InvertedIndex, MemoryAssignment, MemoryMode, Provenance,
};
use crate::rng;
use crate::selector::{
    SelectPolicy, SelectorCheckpoint, SelectorConfig, SelectorExample, SelectorTrainOptions,
    Strategy,
};

/// When to stop the select-and-regenerate loop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergencePolicy {
    /// Self-memory iterations after the retrieval round; 0 skips the loop.
    pub max_iterations: usize,
    /// Consecutive iterations without a min_delta improvement before stopping.
    pub patience: usize,
    /// Required validation improvement, on the Δ metric's raw scale.
    pub min_delta: f64,
}

impl Default for ConvergencePolicy {
    fn default() -> Self {
        ConvergencePolicy { max_iterations: 5, patience: 2, min_delta: 0.1 }
    }
}

impl ConvergencePolicy {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.patience == 0 {
            return Err(PipelineError::stage("configure", "patience must be at least 1"));
        }
        if !self.min_delta.is_finite() || self.min_delta < 0.0 {
            return Err(PipelineError::stage("configure", "min_delta must be non-negative"));
        }
        Ok(())
    }
}

/// Candidate-quality statistics of one split's pools: the distribution over
/// all (source, candidate) scores plus the mean per-source best.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolStats {
    pub min: f64,
    pub q1: f64,
    pub mean: f64,
    pub q3: f64,
    /// Mean over sources of the best candidate's score.
    pub oracle: f64,
}

/// Everything recorded for one split in one iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitTrack {
    pub memories: Vec<MemoryAssignment>,
    pub pools: Vec<CandidatePool>,
    /// Corpus Δ of the hypothesis-mode decode against references.
    pub hypothesis_score: f64,
    pub stats: PoolStats,
}

/// One round of the loop. Iteration 0 is the retrieval-memory round; later
/// iterations carry self-memory selected from the previous round's pools.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationState {
    pub iteration: usize,
    /// Whether the stopping rule fired at this iteration.
    pub converged: bool,
    pub valid: SplitTrack,
    pub test: SplitTrack,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOptions {
    pub gen_train: TrainOptions,
    pub sel_train: SelectorTrainOptions,
    /// Okapi BM25 parameters for the retrieval index.
    pub bm25_k1: f64,
    pub bm25_b: f64,
    /// Train sources used to build selector training pools.
    pub selector_pool_count: usize,
    /// Retrain the selector at each loop iteration on pools regenerated
    /// under its own latest selections, instead of training it once up
    /// front. Study knob; off by default.
    pub retrain_selector_each_iteration: bool,
    /// Oracle selection reads references; on the test split that is
    /// analysis-only and must be opted into.
    pub allow_oracle_on_test: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            gen_train: TrainOptions::default(),
            sel_train: SelectorTrainOptions::default(),
            bm25_k1: crate::retrieval::DEFAULT_K1,
            bm25_b: crate::retrieval::DEFAULT_B,
            selector_pool_count: 320,
            retrain_selector_each_iteration: false,
            allow_oracle_on_test: false,
        }
    }
}

/// Final test-split report of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub strategy: Strategy,
    pub iterations_run: usize,
    /// Test hypothesis Δ at iteration 0 (retrieval memory).
    pub baseline_score: f64,
    /// Test hypothesis Δ at the last iteration.
    pub final_score: f64,
    pub test_scores: Vec<ScoreReport>,
    /// (source_id, hypothesis tokens) for the final decode.
    pub test_hypotheses: Vec<(String, Vec<String>)>,
    pub seed: u64,
}

/// The complete outcome of `run_selfmem`.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfmemRun {
    pub states: Vec<IterationState>,
    pub generator: GeneratorCheckpoint,
    /// Present only for the trained strategy.
    pub selector: Option<SelectorCheckpoint>,
    pub report: FinalReport,
}

/// Drop sequence-control tokens, keeping everything metric-relevant.
pub fn strip_specials(ids: &[u32]) -> Vec<u32> {
    ids.iter().copied().filter(|&t| t != PAD_ID && t != BOS_ID && t != EOS_ID && t != SEP_ID).collect()
}

fn to_text(vocab: &Vocabulary, ids: &[u32]) -> Vec<String> {
    vocab.decode(&strip_specials(ids))
}

/// Linear-interpolation quantile of an ascending slice.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos as usize;
    let frac = pos - lo as f64;
    if lo + 1 < sorted.len() {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[lo]
    }
}

/// Score every candidate in every pool against its reference and summarize.
/// Pools must be aligned with `ds.pairs` by position.
pub fn pool_stats(
    pools: &[CandidatePool],
    ds: &Datastore,
    kind: DeltaKind,
) -> Result<PoolStats, PipelineError> {
    let vocab = &ds.vocabulary;
    let mut all = Vec::new();
    let mut oracle_sum = 0.0;
    for (pool, pair) in pools.iter().zip(&ds.pairs) {
        let mut best = f64::NEG_INFINITY;
        for c in &pool.candidates {
            let text = to_text(vocab, &c.tokens);
            let d = metrics::delta_sentence(kind, &text, &pair.target)
                .map_err(|e| PipelineError::stage("pool-stats", &e.to_string()))?;
            best = best.max(d);
            all.push(d);
        }
        oracle_sum += best;
    }
    if all.is_empty() {
        return Err(PipelineError::stage("pool-stats", "no candidates to summarize"));
    }
    all.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    Ok(PoolStats {
        min: all[0],
        q1: quantile(&all, 0.25),
        mean,
        q3: quantile(&all, 0.75),
        oracle: oracle_sum / pools.len() as f64,
    })
}

/// Hypothesis-mode decode of a whole split with the given memories.
/// Returns (source_id, tokens) rows in datastore order.
pub fn decode_split(
    gen: &GeneratorCheckpoint,
    ds: &Datastore,
    memories: &[MemoryAssignment],
) -> Result<Vec<(String, Vec<String>)>, PipelineError> {
    let vocab = &ds.vocabulary;
    ds.pairs
        .iter()
        .map(|pair| {
            let mem = memory_for(memories, &pair.id)?;
            let x = vocab.encode(&pair.source);
            let m = vocab.encode(&mem.memory);
            let hyp = gen
                .decode_hypothesis(&x, &m)
                .map_err(|e| PipelineError::stage("decode", &e.to_string()))?;
            Ok((pair.id.clone(), to_text(vocab, &hyp.tokens)))
        })
        .collect()
}

fn memory_for<'m>(
    memories: &'m [MemoryAssignment],
    id: &str,
) -> Result<&'m MemoryAssignment, PipelineError> {
    memories
        .iter()
        .find(|m| m.pair_id == id)
        .ok_or_else(|| PipelineError::stage("decode", &alloc::format!("no memory for pair {id}")))
}

fn decode_pools(
    gen: &GeneratorCheckpoint,
    ds: &Datastore,
    memories: &[MemoryAssignment],
) -> Result<Vec<CandidatePool>, PipelineError> {
    let vocab = &ds.vocabulary;
    ds.pairs
        .iter()
        .map(|pair| {
            let mem = memory_for(memories, &pair.id)?;
            let x = vocab.encode(&pair.source);
            let m = vocab.encode(&mem.memory);
            gen.decode_pool(&pair.id, &x, &m)
                .map_err(|e| PipelineError::stage("decode", &e.to_string()))
        })
        .collect()
}

fn corpus_delta(
    kind: DeltaKind,
    hyps: &[(String, Vec<String>)],
    ds: &Datastore,
) -> Result<f64, PipelineError> {
    let hyp_tokens: Vec<Vec<String>> = hyps.iter().map(|(_, t)| t.clone()).collect();
    let refs: Vec<Vec<String>> = ds.pairs.iter().map(|p| p.target.clone()).collect();
    metrics::delta_corpus(kind, &hyp_tokens, &refs)
        .map_err(|e| PipelineError::stage("score", &e.to_string()))
}

fn eval_track(
    gen: &GeneratorCheckpoint,
    ds: &Datastore,
    memories: Vec<MemoryAssignment>,
    kind: DeltaKind,
) -> Result<SplitTrack, PipelineError> {
    let pools = decode_pools(gen, ds, &memories)?;
    let hyps = decode_split(gen, ds, &memories)?;
    let hypothesis_score = corpus_delta(kind, &hyps, ds)?;
    let stats = pool_stats(&pools, ds, kind)?;
    Ok(SplitTrack { memories, pools, hypothesis_score, stats })
}

/// Select the next round's memory from the previous round's pools.
/// `prev_iteration` is the round the pools came from, recorded in the
/// provenance of every produced assignment.
fn select_memories(
    strategy: Strategy,
    selector: Option<&SelectorCheckpoint>,
    pools: &[CandidatePool],
    ds: &Datastore,
    kind: DeltaKind,
    prev_iteration: usize,
    random: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vec<MemoryAssignment>, PipelineError> {
    let vocab = &ds.vocabulary;
    let fail = |e: &dyn core::fmt::Display| PipelineError::stage("select-memory", &e.to_string());
    pools
        .iter()
        .zip(&ds.pairs)
        .map(|(pool, pair)| {
            debug_assert_eq!(pool.source_id, pair.id, "pools aligned with datastore");
            let candidates: Vec<Vec<u32>> =
                pool.candidates.iter().map(|c| strip_specials(&c.tokens)).collect();
            let x = vocab.encode(&pair.source);
            let deltas: Vec<f64> = if strategy == Strategy::Oracle {
                pool.candidates
                    .iter()
                    .map(|c| {
                        metrics::delta_sentence(kind, &to_text(vocab, &c.tokens), &pair.target)
                            .map_err(|e| fail(&e))
                    })
                    .collect::<Result<_, _>>()?
            } else {
                Vec::new()
            };
            let mut policy = match strategy {
                Strategy::Trained => SelectPolicy::Trained(
                    selector.ok_or_else(|| {
                        PipelineError::stage("select-memory", "trained strategy needs a selector")
                    })?,
                ),
                Strategy::Oracle => SelectPolicy::Oracle { deltas: &deltas },
                Strategy::Random => SelectPolicy::Random { rng: random },
                Strategy::Likelihood => SelectPolicy::Likelihood,
            };
            let sel = crate::selector::select(&mut policy, &pair.id, &x, &candidates)
                .map_err(|e| fail(&e))?;
            Ok(MemoryAssignment {
                pair_id: pair.id.clone(),
                memory: vocab.decode(&sel.chosen),
                provenance: Provenance::SelfMem {
                    iteration: prev_iteration,
                    candidate_rank: sel.chosen_rank,
                },
            })
        })
        .collect()
}

/// Build selector training examples from train-split pools.
fn selector_examples(
    pools: &[CandidatePool],
    ds: &Datastore,
    kind: DeltaKind,
) -> Result<Vec<SelectorExample>, PipelineError> {
    let vocab = &ds.vocabulary;
    pools
        .iter()
        .zip(&ds.pairs)
        .map(|(pool, pair)| {
            let candidates: Vec<Vec<u32>> =
                pool.candidates.iter().map(|c| strip_specials(&c.tokens)).collect();
            let deltas = pool
                .candidates
                .iter()
                .map(|c| {
                    metrics::delta_sentence(kind, &to_text(vocab, &c.tokens), &pair.target)
                        .map_err(|e| PipelineError::stage("selector-pools", &e.to_string()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(SelectorExample {
                source_id: pair.id.clone(),
                x: vocab.encode(&pair.source),
                candidates,
                deltas,
            })
        })
        .collect()
}

fn full_test_scores(hyps: &[(String, Vec<String>)], ds: &Datastore) -> Vec<ScoreReport> {
    let hyp_tokens: Vec<Vec<String>> = hyps.iter().map(|(_, t)| t.clone()).collect();
    let refs: Vec<Vec<String>> = ds.pairs.iter().map(|p| p.target.clone()).collect();
    let per_sentence = |f: &dyn Fn(&[String], &[String]) -> f64| -> Vec<f64> {
        hyp_tokens.iter().zip(&refs).map(|(h, r)| f(h, r)).collect()
    };
    vec![
        ScoreReport::new(
            "bleu",
            metrics::corpus_bleu(&hyp_tokens, &refs),
            per_sentence(&|h, r| metrics::sentence_bleu(h, r)),
        ),
        ScoreReport::new(
            "rouge_1",
            mean(&per_sentence(&|h, r| metrics::rouge_n(h, r, 1))),
            per_sentence(&|h, r| metrics::rouge_n(h, r, 1)),
        ),
        ScoreReport::new(
            "rouge_2",
            mean(&per_sentence(&|h, r| metrics::rouge_n(h, r, 2))),
            per_sentence(&|h, r| metrics::rouge_n(h, r, 2)),
        ),
        ScoreReport::new(
            "rouge_l",
            mean(&per_sentence(&|h, r| metrics::rouge_l(h, r))),
            per_sentence(&|h, r| metrics::rouge_l(h, r)),
        ),
        ScoreReport::new("distinct_1", metrics::distinct_n(&hyp_tokens, 1), Vec::new()),
        ScoreReport::new("distinct_2", metrics::distinct_n(&hyp_tokens, 2), Vec::new()),
    ]
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Run the full framework: retrieve, train generator, pool, train selector,
/// then the select-and-regenerate loop with the chosen strategy. `observer`
/// sees each IterationState as soon as it is complete, so partial progress
/// can be persisted by the caller.
#[allow(clippy::too_many_arguments)]
pub fn run_selfmem(
    train: &Datastore,
    valid: &Datastore,
    test: &Datastore,
    gen_config: GeneratorConfig,
    sel_config: SelectorConfig,
    policy: ConvergencePolicy,
    strategy: Strategy,
    opts: &PipelineOptions,
    mut observer: impl FnMut(&IterationState),
) -> Result<SelfmemRun, PipelineError> {
    policy.validate()?;
    if strategy == Strategy::Oracle && !opts.allow_oracle_on_test {
        return Err(PipelineError::stage(
            "configure",
            "oracle strategy reads test references; pass the analysis flag to allow it",
        ));
    }
    let kind = sel_config.delta;
    let seed = gen_config.seed;

    let stage = |name: &'static str| move |e: &dyn core::fmt::Display| {
        PipelineError::stage(name, &e.to_string())
    };

    log::info!("stage index: building retrieval index over {} train pairs", train.pairs.len());
    let index = InvertedIndex::build_with_params(train, opts.bm25_k1, opts.bm25_b);

    log::info!("stage retrieve: assigning retrieval memory");
    let train_mem = assign_memory(train, &index, train, MemoryMode::Retrieved)
        .map_err(|e| stage("retrieve")(&e))?;
    let valid_mem = assign_memory(valid, &index, train, MemoryMode::Retrieved)
        .map_err(|e| stage("retrieve")(&e))?;
    let test_mem = assign_memory(test, &index, train, MemoryMode::Retrieved)
        .map_err(|e| stage("retrieve")(&e))?;

    log::info!("stage train-generator: {} examples", train.pairs.len());
    let generator = GeneratorCheckpoint::train(
        train,
        &train_mem,
        valid,
        &valid_mem,
        gen_config,
        &opts.gen_train,
    )
    .map_err(|e| stage("train-generator")(&e))?;

    let mut selector: Option<SelectorCheckpoint> = None;
    let mut sub: Option<Datastore> = None;
    let mut sub_pools: Vec<CandidatePool> = Vec::new();
    if strategy == Strategy::Trained {
        let n = opts.selector_pool_count.min(train.pairs.len());
        log::info!("stage selector-pools: decoding {n} train pools");
        let sub_ds = Datastore::new(
            train.pairs[..n].to_vec(),
            train.split,
            train.vocabulary.clone(),
        )
        .map_err(|e| stage("selector-pools")(&e))?;
        sub_pools = decode_pools(&generator, &sub_ds, &train_mem)?;
        let examples = selector_examples(&sub_pools, &sub_ds, kind)?;
        log::info!("stage train-selector: {} pools", examples.len());
        selector = Some(
            SelectorCheckpoint::train(
                &examples,
                sel_config.clone(),
                train.vocabulary.len(),
                &opts.sel_train,
            )
            .map_err(|e| stage("train-selector")(&e))?,
        );
        sub = Some(sub_ds);
    }

    let mut random = rng::stream(seed, "random-select");
    let mut states: Vec<IterationState> = Vec::new();

    log::info!("iteration 0: retrieval memory");
    let state0 = IterationState {
        iteration: 0,
        converged: false,
        valid: eval_track(&generator, valid, valid_mem, kind)?,
        test: eval_track(&generator, test, test_mem, kind)?,
    };
    log::info!(
        "iteration 0: valid {:.3}, test {:.3}",
        state0.valid.hypothesis_score,
        state0.test.hypothesis_score
    );
    observer(&state0);
    states.push(state0);

    let mut best_valid = states[0].valid.hypothesis_score;
    let mut stale = 0usize;

    for k in 1..=policy.max_iterations {
        if opts.retrain_selector_each_iteration && k >= 2 {
            if let (Some(sel), Some(sub_ds)) = (selector.as_ref(), sub.as_ref()) {
                log::info!("stage retrain-selector: iteration {k}");
                let chosen = select_memories(
                    strategy,
                    Some(sel),
                    &sub_pools,
                    sub_ds,
                    kind,
                    k - 1,
                    &mut random,
                )?;
                sub_pools = decode_pools(&generator, sub_ds, &chosen)?;
                let examples = selector_examples(&sub_pools, sub_ds, kind)?;
                selector = Some(
                    SelectorCheckpoint::train(
                        &examples,
                        sel_config.clone(),
                        train.vocabulary.len(),
                        &opts.sel_train,
                    )
                    .map_err(|e| stage("train-selector")(&e))?,
                );
            }
        }
        let prev = states.last().expect("at least the retrieval iteration");
        let valid_mem = select_memories(
            strategy,
            selector.as_ref(),
            &prev.valid.pools,
            valid,
            kind,
            k - 1,
            &mut random,
        )?;
        let test_mem = select_memories(
            strategy,
            selector.as_ref(),
            &prev.test.pools,
            test,
            kind,
            k - 1,
            &mut random,
        )?;
        let mut state = IterationState {
            iteration: k,
            converged: false,
            valid: eval_track(&generator, valid, valid_mem, kind)?,
            test: eval_track(&generator, test, test_mem, kind)?,
        };
        let score = state.valid.hypothesis_score;
        log::info!(
            "iteration {k}: valid {score:.3}, test {:.3}",
            state.test.hypothesis_score
        );
        if score - best_valid < policy.min_delta {
            stale += 1;
        } else {
            stale = 0;
        }
        best_valid = best_valid.max(score);
        if stale >= policy.patience {
            state.converged = true;
            observer(&state);
            states.push(state);
            break;
        }
        observer(&state);
        states.push(state);
    }

    let last = states.last().expect("at least one state");
    let final_hyps = decode_split(&generator, test, &last.test.memories)?;
    let report = FinalReport {
        strategy,
        iterations_run: states.len() - 1,
        baseline_score: states[0].test.hypothesis_score,
        final_score: last.test.hypothesis_score,
        test_scores: full_test_scores(&final_hyps, test),
        test_hypotheses: final_hyps,
        seed,
    };
    Ok(SelfmemRun { states, generator, selector, report })
}

// ── Memory ablation ──

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationMode {
    Retrieval,
    /// The generator's own retrieval-memory output, reused as memory.
    Beam,
    Reference,
    Random,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] =
        [AblationMode::Retrieval, AblationMode::Beam, AblationMode::Reference, AblationMode::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Retrieval => "retrieval",
            AblationMode::Beam => "beam",
            AblationMode::Reference => "reference",
            AblationMode::Random => "random",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: AblationMode,
    /// Corpus BLEU of the memory text against references.
    pub memory_score: f64,
    /// Corpus BLEU of the decoded hypotheses against references.
    pub hypothesis_score: f64,
}

/// Decode the evaluation split under each memory regime with a fixed
/// generator; score the memory itself and the resulting hypotheses.
pub fn ablate_memory(
    gen: &GeneratorCheckpoint,
    bank: &Datastore,
    eval: &Datastore,
    index: &InvertedIndex,
    modes: &[AblationMode],
) -> Result<Vec<AblationRow>, PipelineError> {
    let fail = |e: &dyn core::fmt::Display| PipelineError::stage("ablate", &e.to_string());
    let refs: Vec<Vec<String>> = eval.pairs.iter().map(|p| p.target.clone()).collect();
    modes
        .iter()
        .map(|&mode| {
            let memories = match mode {
                AblationMode::Retrieval => {
                    assign_memory(eval, index, bank, MemoryMode::Retrieved).map_err(|e| fail(&e))?
                }
                AblationMode::Reference => {
                    assign_memory(eval, index, bank, MemoryMode::Reference).map_err(|e| fail(&e))?
                }
                AblationMode::Random => {
                    assign_memory(eval, index, bank, MemoryMode::Random { seed: gen.config.seed })
                        .map_err(|e| fail(&e))?
                }
                AblationMode::Beam => {
                    let retrieved = assign_memory(eval, index, bank, MemoryMode::Retrieved)
                        .map_err(|e| fail(&e))?;
                    let own = decode_split(gen, eval, &retrieved)?;
                    own.into_iter()
                        .map(|(pair_id, tokens)| MemoryAssignment {
                            pair_id,
                            memory: tokens,
                            provenance: Provenance::SelfMem { iteration: 0, candidate_rank: 0 },
                        })
                        .collect()
                }
            };
            let mem_tokens: Vec<Vec<String>> = eval
                .pairs
                .iter()
                .map(|p| Ok(memory_for(&memories, &p.id)?.memory.clone()))
                .collect::<Result<_, PipelineError>>()?;
            let hyps = decode_split(gen, eval, &memories)?;
            let hyp_tokens: Vec<Vec<String>> = hyps.into_iter().map(|(_, t)| t).collect();
            Ok(AblationRow {
                mode,
                memory_score: metrics::corpus_bleu(&mem_tokens, &refs),
                hypothesis_score: metrics::corpus_bleu(&hyp_tokens, &refs),
            })
        })
        .collect()
}

// ── Memory/hypothesis correlation ──

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    /// Per-example (memory-vs-reference, hypothesis-vs-reference) BLEU.
    pub pairs: Vec<(f64, f64)>,
    /// Spearman rank correlation; None when a column is constant.
    pub spearman: Option<f64>,
}

impl CorrelationReport {
    pub fn from_pairs(pairs: Vec<(f64, f64)>) -> Self {
        let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let spearman = metrics::spearman(&xs, &ys);
        if spearman.is_none() {
            log::warn!("correlation undefined: a column is constant or too short");
        }
        CorrelationReport { pairs, spearman }
    }
}

/// Per-example memory quality vs output quality under the given memories,
/// with the rank correlation between the two columns.
pub fn primal_correlation(
    gen: &GeneratorCheckpoint,
    ds: &Datastore,
    memories: &[MemoryAssignment],
) -> Result<CorrelationReport, PipelineError> {
    let hyps = decode_split(gen, ds, memories)?;
    let pairs = ds
        .pairs
        .iter()
        .zip(&hyps)
        .map(|(pair, (_, hyp))| {
            let mem = memory_for(memories, &pair.id)?;
            Ok((
                metrics::sentence_bleu(&mem.memory, &pair.target),
                metrics::sentence_bleu(hyp, &pair.target),
            ))
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    Ok(CorrelationReport::from_pairs(pairs))
}

// ── Iteration report ──

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub iteration: usize,
    pub valid_score: f64,
    pub test_score: f64,
    pub pool_min: f64,
    pub pool_q1: f64,
    pub pool_mean: f64,
    pub pool_q3: f64,
    pub pool_oracle: f64,
    pub converged: bool,
}

/// Flatten iteration states into report rows (valid-split pool statistics).
pub fn iteration_report(states: &[IterationState]) -> Vec<IterationRow> {
    states
        .iter()
        .map(|s| IterationRow {
            iteration: s.iteration,
            valid_score: s.valid.hypothesis_score,
            test_score: s.test.hypothesis_score,
            pool_min: s.valid.stats.min,
            pool_q1: s.valid.stats.q1,
            pool_mean: s.valid.stats.mean,
            pool_q3: s.valid.stats.q3,
            pool_oracle: s.valid.stats.oracle,
            converged: s.converged,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PipelineError {
    pub stage: &'static str,
    pub message: String,
}

impl PipelineError {
    pub fn stage(stage: &'static str, message: &str) -> Self {
        PipelineError { stage, message: message.to_string() }
    }
}

impl core::fmt::Display for PipelineError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "stage {}: {}", self.stage, self.message)
    }
}

impl core::error::Error for PipelineError {}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, Split, SyntheticTaskSpec, TextPair, Vocabulary};
    use crate::decode::Hypothesis;
    use crate::generator::Architecture;

    fn micro_task() -> (Datastore, Datastore, Datastore) {
        let spec = SyntheticTaskSpec {
            template_count: 4,
            lexicon_size: 40,
            pairs_per_split: (96, 16, 12),
            slot_count_range: (2, 3),
            noise_rate: 0.0,
            seed: 17,
        };
        generate_synthetic(spec).expect("micro task generates")
    }

    fn micro_gen_config() -> GeneratorConfig {
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

    fn micro_sel_config() -> SelectorConfig {
        SelectorConfig {
            layers: 1,
            model_dim: 16,
            heads: 2,
            ff_dim: 32,
            dropout: 0.1,
            max_len: 32,
            temperature: 0.5,
            delta: DeltaKind::Bleu,
            seed: 17,
        }
    }

    fn micro_opts() -> PipelineOptions {
        PipelineOptions {
            gen_train: TrainOptions { max_epochs: 2, ..TrainOptions::default() },
            sel_train: SelectorTrainOptions {
                max_epochs: 2,
                heldout_fraction: 0.25,
                ..SelectorTrainOptions::default()
            },
            selector_pool_count: 24,
            ..PipelineOptions::default()
        }
    }

    fn loose_policy(max_iterations: usize) -> ConvergencePolicy {
        ConvergencePolicy { max_iterations, patience: 5, min_delta: 0.0 }
    }

    fn micro_run(strategy: Strategy, max_iterations: usize, allow_oracle: bool) -> SelfmemRun {
        let (train, valid, test) = micro_task();
        let mut opts = micro_opts();
        opts.allow_oracle_on_test = allow_oracle;
        run_selfmem(
            &train,
            &valid,
            &test,
            micro_gen_config(),
            micro_sel_config(),
            loose_policy(max_iterations),
            strategy,
            &opts,
            |_| {},
        )
        .expect("micro run completes")
    }

    #[test]
    fn quantile_interpolates_linearly() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert!((quantile(&v, 0.25) - 1.75).abs() < 1e-12);
        assert!((quantile(&v, 0.75) - 3.25).abs() < 1e-12);
        assert_eq!(quantile(&[7.0], 0.5), 7.0);
        assert_eq!(quantile(&[], 0.5), 0.0);
    }

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(|w| w.to_string()).collect()
    }

    fn hyp(tokens: Vec<u32>) -> Hypothesis {
        Hypothesis { tokens, total_logprob: -1.0, per_token_logprobs: Vec::new(), finished: true }
    }

    #[test]
    fn pool_stats_matches_hand_computation() {
        let pairs = vec![
            TextPair {
                id: "a".to_string(),
                source: words("s1 s2 s3 s4"),
                target: words("aa bb cc dd"),
                template_id: None,
            },
            TextPair {
                id: "b".to_string(),
                source: words("s5 s6 s7 s8"),
                target: words("ee ff gg hh"),
                template_id: None,
            },
        ];
        let vocab = Vocabulary::build(&pairs);
        let ds = Datastore::new(pairs, Split::Valid, vocab.clone()).unwrap();
        // Pool a: an exact copy (100) and pair b's target (0 overlap).
        // Pool b: two candidates with no overlap at all (0 and 0).
        let pools = vec![
            CandidatePool {
                source_id: "a".to_string(),
                candidates: vec![
                    hyp(vocab.encode(&words("aa bb cc dd"))),
                    hyp(vocab.encode(&words("ee ff gg hh"))),
                ],
            },
            CandidatePool {
                source_id: "b".to_string(),
                candidates: vec![
                    hyp(vocab.encode(&words("aa bb cc dd"))),
                    hyp(vocab.encode(&words("s5 s6 s7 s8"))),
                ],
            },
        ];
        let stats = pool_stats(&pools, &ds, DeltaKind::Bleu).unwrap();
        // Scores sorted: [0, 0, 0, 100].
        assert_eq!(stats.min, 0.0);
        assert_eq!(stats.q1, 0.0);
        assert!((stats.mean - 25.0).abs() < 1e-9, "mean {}", stats.mean);
        assert!((stats.q3 - 25.0).abs() < 1e-9, "q3 {}", stats.q3);
        assert!((stats.oracle - 50.0).abs() < 1e-9, "oracle {}", stats.oracle);
    }

    #[test]
    fn strip_specials_drops_control_tokens() {
        let ids = vec![BOS_ID, 9, SEP_ID, 10, PAD_ID, EOS_ID, 11];
        assert_eq!(strip_specials(&ids), vec![9, 10, 11]);
    }

    #[test]
    fn correlation_report_endpoints() {
        let up = CorrelationReport::from_pairs(vec![(1.0, 10.0), (2.0, 20.0), (3.0, 30.0)]);
        assert_eq!(up.spearman, Some(1.0));
        let down = CorrelationReport::from_pairs(vec![(1.0, 30.0), (2.0, 20.0), (3.0, 10.0)]);
        assert_eq!(down.spearman, Some(-1.0));
        let flat = CorrelationReport::from_pairs(vec![(1.0, 5.0), (2.0, 5.0), (3.0, 5.0)]);
        assert_eq!(flat.spearman, None);
    }

    #[test]
    fn oracle_on_test_needs_the_analysis_flag() {
        let (train, valid, test) = micro_task();
        let err = run_selfmem(
            &train,
            &valid,
            &test,
            micro_gen_config(),
            micro_sel_config(),
            loose_policy(1),
            Strategy::Oracle,
            &micro_opts(),
            |_| {},
        )
        .unwrap_err();
        assert_eq!(err.stage, "configure");
    }

    #[test]
    fn convergence_policy_rejects_bad_values() {
        assert!(ConvergencePolicy { max_iterations: 3, patience: 0, min_delta: 0.1 }
            .validate()
            .is_err());
        assert!(ConvergencePolicy { max_iterations: 3, patience: 1, min_delta: -0.5 }
            .validate()
            .is_err());
        assert!(ConvergencePolicy { max_iterations: 0, patience: 1, min_delta: 0.0 }
            .validate()
            .is_ok());
    }

    #[test]
    fn skip_loop_run_equals_retrieval_baseline() {
        let run = micro_run(Strategy::Likelihood, 0, false);
        assert_eq!(run.states.len(), 1);
        assert_eq!(run.report.iterations_run, 0);
        assert_eq!(run.report.baseline_score, run.report.final_score);
        assert!(!run.states[0].converged);
        assert!(run.selector.is_none());
        for m in &run.states[0].test.memories {
            assert!(
                matches!(m.provenance, Provenance::Retrieved { .. }),
                "iteration 0 memory must be retrieved, got {:?}",
                m.provenance
            );
        }
        let hyps: Vec<Vec<String>> =
            run.report.test_hypotheses.iter().map(|(_, t)| t.clone()).collect();
        assert_eq!(run.report.test_hypotheses.len(), 12);
        let bleu = run
            .report
            .test_scores
            .iter()
            .find(|s| s.kind == "bleu")
            .expect("bleu row present");
        assert_eq!(bleu.per_example.len(), hyps.len());
    }

    #[test]
    fn loop_run_is_deterministic_and_tracks_provenance() {
        let first = micro_run(Strategy::Random, 2, false);
        let second = micro_run(Strategy::Random, 2, false);
        assert_eq!(first.states, second.states);
        assert_eq!(first.report, second.report);

        assert_eq!(first.states.len(), 3);
        for (k, state) in first.states.iter().enumerate() {
            assert_eq!(state.iteration, k);
            if k == 0 {
                continue;
            }
            for (i, m) in state.test.memories.iter().enumerate() {
                match m.provenance {
                    Provenance::SelfMem { iteration, candidate_rank } => {
                        assert_eq!(iteration, k - 1, "memory source round");
                        let prev_pool = &first.states[k - 1].test.pools[i];
                        assert!(candidate_rank < prev_pool.candidates.len());
                        let expect = to_text(
                            &micro_task().2.vocabulary,
                            &prev_pool.candidates[candidate_rank].tokens,
                        );
                        assert_eq!(m.memory, expect, "memory text mirrors the chosen candidate");
                    }
                    ref other => panic!("expected self-memory provenance, got {other:?}"),
                }
            }
        }

        let rows = iteration_report(&first.states);
        assert_eq!(rows.len(), first.states.len());
        for (row, state) in rows.iter().zip(&first.states) {
            assert_eq!(row.iteration, state.iteration);
            assert_eq!(row.valid_score, state.valid.hypothesis_score);
            assert_eq!(row.test_score, state.test.hypothesis_score);
            assert_eq!(row.pool_mean, state.valid.stats.mean);
            assert_eq!(row.pool_oracle, state.valid.stats.oracle);
            assert_eq!(row.converged, state.converged);
        }

        // Stored stats must be reproducible from the stored pools.
        let (_, valid, _) = micro_task();
        for state in &first.states {
            let again = pool_stats(&state.valid.pools, &valid, DeltaKind::Bleu).unwrap();
            assert_eq!(again, state.valid.stats);
        }

        assert_eq!(first.report.baseline_score, first.states[0].test.hypothesis_score);
        assert_eq!(
            first.report.final_score,
            first.states.last().unwrap().test.hypothesis_score
        );
        assert_eq!(first.report.iterations_run, 2);
        assert_eq!(first.report.seed, 17);
    }

    #[test]
    fn oracle_selection_picks_the_best_candidate() {
        let run = micro_run(Strategy::Oracle, 1, true);
        assert_eq!(run.states.len(), 2);
        let (_, valid, _) = micro_task();
        let vocab = &valid.vocabulary;
        for (i, m) in run.states[1].valid.memories.iter().enumerate() {
            let pool = &run.states[0].valid.pools[i];
            let deltas: Vec<f64> = pool
                .candidates
                .iter()
                .map(|c| {
                    metrics::delta_sentence(
                        DeltaKind::Bleu,
                        &to_text(vocab, &c.tokens),
                        &valid.pairs[i].target,
                    )
                    .unwrap()
                })
                .collect();
            let best = deltas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            match m.provenance {
                Provenance::SelfMem { candidate_rank, .. } => {
                    assert_eq!(
                        deltas[candidate_rank], best,
                        "oracle must choose a maximal candidate"
                    );
                }
                ref other => panic!("expected self-memory provenance, got {other:?}"),
            }
        }
    }

    #[test]
    fn trained_strategy_produces_a_selector() {
        let run = micro_run(Strategy::Trained, 1, false);
        assert!(run.selector.is_some(), "trained strategy must train a selector");
        assert_eq!(run.states.len(), 2);
        for m in &run.states[1].test.memories {
            assert!(matches!(m.provenance, Provenance::SelfMem { iteration: 0, .. }));
        }
    }

    #[test]
    fn selector_retraining_knob_is_deterministic() {
        let (train, valid, test) = micro_task();
        let mut opts = micro_opts();
        opts.retrain_selector_each_iteration = true;
        let run = |opts: &PipelineOptions| {
            run_selfmem(
                &train,
                &valid,
                &test,
                micro_gen_config(),
                micro_sel_config(),
                loose_policy(2),
                Strategy::Trained,
                opts,
                |_| {},
            )
            .expect("retraining run completes")
        };
        let first = run(&opts);
        let second = run(&opts);
        assert_eq!(first.states, second.states);
        assert!(first.selector.is_some());
        assert_eq!(first.states.len(), 3);
    }

    #[test]
    fn reference_memory_ablation_scores_hundred() {
        let (train, valid, test) = micro_task();
        let gen = GeneratorCheckpoint::train(
            &train,
            &assign_memory(&train, &InvertedIndex::build(&train), &train, MemoryMode::Retrieved)
                .unwrap(),
            &valid,
            &assign_memory(&valid, &InvertedIndex::build(&train), &train, MemoryMode::Retrieved)
                .unwrap(),
            micro_gen_config(),
            &TrainOptions { max_epochs: 2, ..TrainOptions::default() },
        )
        .unwrap();
        let index = InvertedIndex::build(&train);
        let rows = ablate_memory(&gen, &train, &test, &index, &AblationMode::ALL).unwrap();
        assert_eq!(rows.len(), 4);
        for (row, mode) in rows.iter().zip(AblationMode::ALL) {
            assert_eq!(row.mode, mode);
            assert!(row.memory_score.is_finite() && row.hypothesis_score.is_finite());
        }
        let reference = rows.iter().find(|r| r.mode == AblationMode::Reference).unwrap();
        assert_eq!(reference.memory_score, 100.0, "reference memory is the reference");
    }

    #[test]
    fn observer_sees_every_iteration_in_order() {
        let (train, valid, test) = micro_task();
        let mut seen = Vec::new();
        let run = run_selfmem(
            &train,
            &valid,
            &test,
            micro_gen_config(),
            micro_sel_config(),
            loose_policy(1),
            Strategy::Likelihood,
            &micro_opts(),
            |s| seen.push(s.iteration),
        )
        .unwrap();
        assert_eq!(seen, vec![0, 1]);
        assert_eq!(run.states.len(), 2);
    }

    #[test]
    fn convergence_stops_after_stale_iterations() {
        let (train, valid, test) = micro_task();
        // min_delta far above any attainable improvement: every iteration is
        // stale, so patience 1 stops the loop at the first one.
        let policy = ConvergencePolicy { max_iterations: 4, patience: 1, min_delta: 1e6 };
        let run = run_selfmem(
            &train,
            &valid,
            &test,
            micro_gen_config(),
            micro_sel_config(),
            policy,
            Strategy::Likelihood,
            &micro_opts(),
            |_| {},
        )
        .unwrap();
        assert_eq!(run.states.len(), 2, "stopped after one stale iteration");
        assert!(run.states[1].converged);
        assert!(!run.states[0].converged);
    }
}
