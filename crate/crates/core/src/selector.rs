//! The memory selector: a small encoder that scores (source, candidate)
//! pairs and is trained to match the quality-induced softmax distribution
//! over each candidate pool.
//!
//! Scoring encodes `x <sep> c`, takes the first-position state, and maps it
//! through a linear head to a scalar; the pool's scalars are softmaxed into
//! a distribution. Training minimizes the cross-entropy form of the KL
//! divergence against `softmax(delta / temperature)`, with early stopping on
//! the held-out mean quality of the selected candidates.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::SEP_ID;
use crate::linalg::{self, Mat};
use crate::metrics::DeltaKind;
use crate::nn::{
    bind_enc_layer, bind_ln, Adam, EncLayerParams, ForwardCtx, LnParams, ParamCollection,
    VarEncLayer, VarLn,
};
use crate::rng;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectorConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub max_len: usize,
    /// Temperature of the target softmax over normalized quality scores.
    pub temperature: f64,
    /// Quality metric whose softened distribution the selector imitates.
    pub delta: DeltaKind,
    pub seed: u64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig {
            layers: 2,
            model_dim: 64,
            heads: 4,
            ff_dim: 128,
            dropout: 0.1,
            max_len: 48,
            temperature: 0.5,
            delta: DeltaKind::Bleu,
            seed: 17,
        }
    }
}

impl SelectorConfig {
    pub fn validate(&self) -> Result<(), SelectorError> {
        if self.layers == 0 {
            return Err(SelectorError::Config("layers must be positive"));
        }
        if self.model_dim == 0 || self.model_dim % self.heads != 0 {
            return Err(SelectorError::Config("model_dim must be divisible by heads"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(SelectorError::Config("dropout must lie in [0,1)"));
        }
        if self.temperature <= 0.0 {
            return Err(SelectorError::Config("temperature must be positive"));
        }
        if self.max_len < 4 {
            return Err(SelectorError::Config("max_len too small"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectorParams {
    pub embed: Mat,
    pub enc: Vec<EncLayerParams>,
    pub enc_ln_f: LnParams,
    /// Linear head [model_dim, 1] mapping the pooled state to a raw score.
    pub head_w: Mat,
    pub head_b: Mat,
}

impl SelectorParams {
    pub fn init(config: &SelectorConfig, vocab_size: usize, rng: &mut ChaCha8Rng) -> Self {
        let d = config.model_dim;
        let embed = crate::nn::uniform(rng, vocab_size, d, 0.05);
        let enc =
            (0..config.layers).map(|_| EncLayerParams::init(rng, d, config.ff_dim)).collect();
        let head_limit = libm::sqrt(6.0 / (d + 1) as f64);
        let head_w = crate::nn::uniform(rng, d, 1, head_limit);
        SelectorParams { embed, enc, enc_ln_f: LnParams::init(d), head_w, head_b: Mat::zeros(1, 1) }
    }
}

impl ParamCollection for SelectorParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Mat)) {
        f("embed", &self.embed);
        for (i, l) in self.enc.iter().enumerate() {
            l.visit(&alloc::format!("enc.{i}"), f);
        }
        self.enc_ln_f.visit("enc_ln_f", f);
        f("head_w", &self.head_w);
        f("head_b", &self.head_b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Mat)) {
        f("embed", &mut self.embed);
        for (i, l) in self.enc.iter_mut().enumerate() {
            l.visit_mut(&alloc::format!("enc.{i}"), f);
        }
        self.enc_ln_f.visit_mut("enc_ln_f", f);
        f("head_w", &mut self.head_w);
        f("head_b", &mut self.head_b);
    }
}

struct SelVars {
    embed: Var,
    enc: Vec<VarEncLayer>,
    enc_ln_f: VarLn,
    head_w: Var,
    head_b: Var,
}

impl SelVars {
    fn bind(t: &mut Tape, p: &SelectorParams) -> Self {
        SelVars {
            embed: t.param(&p.embed),
            enc: p.enc.iter().map(|l| bind_enc_layer(t, l)).collect(),
            enc_ln_f: bind_ln(t, &p.enc_ln_f),
            head_w: t.param(&p.head_w),
            head_b: t.param(&p.head_b),
        }
    }

    fn ordered(&self) -> Vec<Var> {
        let mut out = vec![self.embed];
        for l in &self.enc {
            l.visit_vars(&mut |v| out.push(v));
        }
        self.enc_ln_f.visit_vars(&mut |v| out.push(v));
        out.push(self.head_w);
        out.push(self.head_b);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorTrainMeta {
    pub epochs_run: usize,
    pub best_epoch: usize,
    /// Held-out mean selected quality at the best epoch (raw metric scale).
    pub best_heldout_delta: f64,
    /// Per-epoch mean training loss.
    pub train_losses: Vec<f64>,
    /// Per-epoch held-out mean selected quality.
    pub heldout_deltas: Vec<f64>,
    pub seed: u64,
}

impl SelectorTrainMeta {
    pub fn untrained(seed: u64) -> Self {
        SelectorTrainMeta {
            epochs_run: 0,
            best_epoch: 0,
            best_heldout_delta: f64::NEG_INFINITY,
            train_losses: Vec::new(),
            heldout_deltas: Vec::new(),
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectorCheckpoint {
    pub config: SelectorConfig,
    pub vocab_size: usize,
    pub params: SelectorParams,
    pub meta: SelectorTrainMeta,
}

/// One training example: a source, its candidate pool (token ids without
/// specials), and each candidate's raw quality score against the reference.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectorExample {
    pub source_id: String,
    pub x: Vec<u32>,
    pub candidates: Vec<Vec<u32>>,
    pub deltas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectorTrainOptions {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Fraction of examples held out for the early-stopping signal.
    pub heldout_fraction: f64,
    pub grad_clip: f64,
}

impl Default for SelectorTrainOptions {
    fn default() -> Self {
        SelectorTrainOptions {
            lr: 2e-3,
            batch_size: 8,
            max_epochs: 30,
            patience: 3,
            heldout_fraction: 0.1,
            grad_clip: 1.0,
        }
    }
}

/// Softmax of quality scores at temperature τ. Raw scores are normalized to
/// [0,1] by the metric's scale before softening, so τ means the same thing
/// for BLEU-like (0..100) and ROUGE-like (0..1) metrics.
pub fn target_distribution(deltas: &[f64], kind: DeltaKind, tau: f64) -> Vec<f64> {
    let scale = kind.scale();
    let mut out: Vec<f64> = deltas.iter().map(|d| d / scale / tau).collect();
    linalg::softmax_in_place(&mut out);
    out
}

/// Cross-entropy form of the KL objective: −Σ target_i · ln(predicted_i).
/// Zero predicted mass on a supported candidate is clamped at ε=1e-9; the
/// returned flag reports whether clamping happened.
pub fn kl_loss(predicted: &[f64], target: &[f64]) -> (f64, bool) {
    assert_eq!(predicted.len(), target.len(), "distributions over the same support");
    let mut loss = 0.0;
    let mut clamped = false;
    for (&p, &t) in predicted.iter().zip(target) {
        if t == 0.0 {
            continue;
        }
        let p = if p < 1e-9 {
            clamped = true;
            1e-9
        } else {
            p
        };
        loss -= t * libm::log(p);
    }
    (loss, clamped)
}

pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| -v * libm::log(v)).sum()
}

impl SelectorCheckpoint {
    pub fn init(config: SelectorConfig, vocab_size: usize) -> Result<Self, SelectorError> {
        config.validate()?;
        let mut r = rng::stream(config.seed, "sel-init");
        let params = SelectorParams::init(&config, vocab_size, &mut r);
        let meta = SelectorTrainMeta::untrained(config.seed);
        Ok(SelectorCheckpoint { config, vocab_size, params, meta })
    }

    pub fn from_parts(
        config: SelectorConfig,
        vocab_size: usize,
        params: SelectorParams,
        meta: SelectorTrainMeta,
    ) -> Result<Self, SelectorError> {
        config.validate()?;
        if params.embed.rows != vocab_size || params.embed.cols != config.model_dim {
            return Err(SelectorError::Config("parameter shapes do not match config"));
        }
        Ok(SelectorCheckpoint { config, vocab_size, params, meta })
    }

    /// `x <sep> c`, truncated to max_len by cutting the candidate; the
    /// source is kept whole.
    pub fn pair_input(&self, x: &[u32], c: &[u32]) -> Vec<u32> {
        let cap = self.config.max_len;
        let mut out: Vec<u32> = x.iter().copied().take(cap.saturating_sub(1)).collect();
        if out.len() < x.len() {
            log::warn!("selector source truncated from {} to {} tokens", x.len(), out.len());
        }
        out.push(SEP_ID);
        let room = cap - out.len();
        out.extend(c.iter().copied().take(room));
        out
    }

    /// Raw scalar scores for each candidate, on the tape. Returns the score
    /// vars ([1,1] each) for graph reuse during training.
    fn scores_on_tape(
        &self,
        t: &mut Tape,
        ctx: &mut ForwardCtx,
        vars: &SelVars,
        pos: &Mat,
        x: &[u32],
        candidates: &[Vec<u32>],
    ) -> Vec<Var> {
        candidates
            .iter()
            .map(|c| {
                let ids = self.pair_input(x, c);
                let e = crate::nn::embed_sequence(t, ctx, vars.embed, &ids, pos);
                let h = crate::nn::encoder_stack(t, ctx, e, &vars.enc, &vars.enc_ln_f);
                let pooled = t.gather(h, &[0]);
                let s = t.matmul(pooled, vars.head_w);
                t.add(s, vars.head_b)
            })
            .collect()
    }

    /// Raw (pre-softmax) scores, deterministic.
    pub fn raw_scores(&self, x: &[u32], candidates: &[Vec<u32>]) -> Result<Vec<f64>, SelectorError> {
        if candidates.is_empty() {
            return Err(SelectorError::EmptyPool);
        }
        let pos = crate::nn::positional_table(self.config.max_len, self.config.model_dim);
        let mut t = Tape::new();
        let mut ctx = ForwardCtx::eval(self.config.heads);
        let vars = SelVars::bind(&mut t, &self.params);
        let scores = self.scores_on_tape(&mut t, &mut ctx, &vars, &pos, x, candidates);
        Ok(scores.iter().map(|&s| t.value(s)[0]).collect())
    }

    /// Distribution over the pool: softmax of the raw scores.
    pub fn score_pool(&self, x: &[u32], candidates: &[Vec<u32>]) -> Result<Vec<f64>, SelectorError> {
        let mut s = self.raw_scores(x, candidates)?;
        linalg::softmax_in_place(&mut s);
        Ok(s)
    }

    /// Listwise loss of the pool against `target` (cross-entropy of the
    /// score softmax, the KL objective up to the target's entropy) together
    /// with its analytic parameter gradients, one matrix per tensor in visit
    /// order. Deterministic; meant for gradient verification.
    pub fn loss_and_param_grads(
        &self,
        x: &[u32],
        candidates: &[Vec<u32>],
        target: &[f64],
    ) -> Result<(f64, Vec<Mat>), SelectorError> {
        if candidates.is_empty() {
            return Err(SelectorError::EmptyPool);
        }
        if target.len() != candidates.len() {
            return Err(SelectorError::Config("target length must match the candidate count"));
        }
        let pos = crate::nn::positional_table(self.config.max_len, self.config.model_dim);
        let mut t = Tape::new();
        let mut ctx = ForwardCtx::eval(self.config.heads);
        let vars = SelVars::bind(&mut t, &self.params);
        let scores = self.scores_on_tape(&mut t, &mut ctx, &vars, &pos, x, candidates);
        let row = t.concat_cols(&scores);
        let logp = t.log_softmax_rows(row);
        let loss = t.weighted_nll_sum(logp, target);
        let grads = t.backward(loss);
        let mats = vars
            .ordered()
            .iter()
            .zip(self.params.tensor_specs())
            .map(|(&v, (_, rows, cols))| Mat::from_vec(rows, cols, grads.grad_or_zeros(v, rows * cols)))
            .collect();
        Ok((t.value(loss)[0], mats))
    }

    /// Train on candidate pools with quality-softened targets; early stop on
    /// held-out mean selected quality. Parameters are rounded through f32 at
    /// the end so a saved checkpoint reloads bit-identically.
    pub fn train(
        examples: &[SelectorExample],
        config: SelectorConfig,
        vocab_size: usize,
        opts: &SelectorTrainOptions,
    ) -> Result<SelectorCheckpoint, SelectorError> {
        config.validate()?;
        if examples.is_empty() {
            return Err(SelectorError::NoExamples);
        }
        for ex in examples {
            if ex.candidates.is_empty() {
                return Err(SelectorError::EmptyPool);
            }
            if ex.candidates.len() != ex.deltas.len() {
                return Err(SelectorError::Config("each candidate needs a quality score"));
            }
        }

        let mut split_rng = rng::stream(config.seed, "sel-split");
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut split_rng);
        let heldout_n = ((examples.len() as f64 * opts.heldout_fraction) as usize)
            .clamp(1, examples.len().saturating_sub(1).max(1));
        let (heldout_idx, train_idx) = order.split_at(heldout_n.min(examples.len() - 1).max(1));
        let train_idx: Vec<usize> = train_idx.to_vec();
        let heldout_idx: Vec<usize> = heldout_idx.to_vec();

        let mut model = SelectorCheckpoint::init(config.clone(), vocab_size)?;
        let pos = crate::nn::positional_table(config.max_len, config.model_dim);
        let mut opt = Adam::new(opts.lr, opts.grad_clip);
        let mut shuffle_rng = rng::stream(config.seed, "sel-shuffle");
        let mut dropout_rng = rng::stream(config.seed, "sel-dropout");

        let heldout_mean = |m: &SelectorCheckpoint| -> Result<f64, SelectorError> {
            let mut total = 0.0;
            for &i in &heldout_idx {
                let ex = &examples[i];
                let dist = m.score_pool(&ex.x, &ex.candidates)?;
                let best = argmax(&dist);
                total += ex.deltas[best];
            }
            Ok(total / heldout_idx.len() as f64)
        };

        let mut best_params = model.params.clone();
        let mut best_delta = heldout_mean(&model)?;
        let mut best_epoch = 0;
        let mut stale = 0;
        let mut train_losses = Vec::new();
        let mut heldout_deltas = Vec::new();
        let mut epochs_run = 0;

        for epoch in 1..=opts.max_epochs {
            epochs_run = epoch;
            let mut idx = train_idx.clone();
            idx.shuffle(&mut shuffle_rng);
            let mut epoch_loss = 0.0;
            let mut epoch_examples = 0usize;

            for batch in idx.chunks(opts.batch_size) {
                let mut accum: Vec<Vec<f64>> = Vec::new();
                for &i in batch {
                    let ex = &examples[i];
                    let target =
                        target_distribution(&ex.deltas, config.delta, config.temperature);
                    let mut t = Tape::new();
                    let mut ctx =
                        ForwardCtx::train(config.heads, config.dropout, &mut dropout_rng);
                    let vars = SelVars::bind(&mut t, &model.params);
                    let scores =
                        model.scores_on_tape(&mut t, &mut ctx, &vars, &pos, &ex.x, &ex.candidates);
                    let row = t.concat_cols(&scores);
                    let logp = t.log_softmax_rows(row);
                    let loss = t.weighted_nll_sum(logp, &target);
                    let lval = t.value(loss)[0];
                    if !lval.is_finite() {
                        return Err(SelectorError::Diverged { epoch });
                    }
                    epoch_loss += lval;
                    epoch_examples += 1;
                    let grads = t.backward(loss);
                    let ordered = vars.ordered();
                    if accum.is_empty() {
                        accum = ordered
                            .iter()
                            .map(|&v| {
                                let (r, c) = t.shape(v);
                                vec![0.0; r * c]
                            })
                            .collect();
                    }
                    for (sum, &v) in accum.iter_mut().zip(&ordered) {
                        if let Some(g) = grads.grad(v) {
                            for (s, gv) in sum.iter_mut().zip(g) {
                                *s += gv;
                            }
                        }
                    }
                }
                let scale = 1.0 / batch.len() as f64;
                for g in accum.iter_mut() {
                    for v in g.iter_mut() {
                        *v *= scale;
                    }
                }
                opt.step(&mut model.params, &accum);
            }

            let mean_loss = epoch_loss / epoch_examples.max(1) as f64;
            train_losses.push(mean_loss);
            let hd = heldout_mean(&model)?;
            heldout_deltas.push(hd);
            log::info!("selector epoch {epoch}: train loss {mean_loss:.4}, heldout delta {hd:.4}");

            if hd > best_delta + 1e-9 {
                best_delta = hd;
                best_epoch = epoch;
                best_params = model.params.clone();
                stale = 0;
            } else {
                stale += 1;
                if stale >= opts.patience {
                    break;
                }
            }
        }

        model.params = best_params;
        crate::nn::quantize_params(&mut model.params);
        model.meta = SelectorTrainMeta {
            epochs_run,
            best_epoch,
            best_heldout_delta: best_delta,
            train_losses,
            heldout_deltas,
            seed: config.seed,
        };
        Ok(model)
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Trained,
    Oracle,
    Random,
    Likelihood,
}

impl Strategy {
    pub fn parse(s: &str) -> Result<Self, SelectorError> {
        match s {
            "trained" => Ok(Strategy::Trained),
            "oracle" => Ok(Strategy::Oracle),
            "random" => Ok(Strategy::Random),
            "likelihood" => Ok(Strategy::Likelihood),
            _ => Err(SelectorError::Config(
                "strategy must be trained, oracle, random, or likelihood",
            )),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Trained => "trained",
            Strategy::Oracle => "oracle",
            Strategy::Random => "random",
            Strategy::Likelihood => "likelihood",
        }
    }
}

/// How to pick from a pool, with the strategy-specific inputs.
pub enum SelectPolicy<'a> {
    Trained(&'a SelectorCheckpoint),
    /// Analysis-only: argmax of precomputed Δ(candidate, reference).
    Oracle { deltas: &'a [f64] },
    Random { rng: &'a mut ChaCha8Rng },
    /// The pool's top candidate by total log-probability.
    Likelihood,
}

impl SelectPolicy<'_> {
    pub fn strategy(&self) -> Strategy {
        match self {
            SelectPolicy::Trained(_) => Strategy::Trained,
            SelectPolicy::Oracle { .. } => Strategy::Oracle,
            SelectPolicy::Random { .. } => Strategy::Random,
            SelectPolicy::Likelihood => Strategy::Likelihood,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub source_id: String,
    pub chosen_rank: usize,
    /// The chosen candidate's token ids, as given in the pool.
    pub chosen: Vec<u32>,
    pub strategy: Strategy,
    /// Pool distribution, trained strategy only.
    pub distribution: Option<Vec<f64>>,
}

/// Pick one candidate from a pool. `candidates` must be in pool order
/// (log-probability descending) for the likelihood strategy to be exact.
pub fn select(
    policy: &mut SelectPolicy<'_>,
    source_id: &str,
    x: &[u32],
    candidates: &[Vec<u32>],
) -> Result<SelectionResult, SelectorError> {
    if candidates.is_empty() {
        return Err(SelectorError::EmptyPool);
    }
    let strategy = policy.strategy();
    let (rank, distribution) = match policy {
        SelectPolicy::Trained(ckpt) => {
            let dist = ckpt.score_pool(x, candidates)?;
            (argmax(&dist), Some(dist))
        }
        SelectPolicy::Oracle { deltas } => {
            if deltas.len() != candidates.len() {
                return Err(SelectorError::Config("oracle needs one delta per candidate"));
            }
            (argmax(deltas), None)
        }
        SelectPolicy::Random { rng } => (rng.gen_range(0..candidates.len()), None),
        SelectPolicy::Likelihood => (0, None),
    };
    Ok(SelectionResult {
        source_id: String::from(source_id),
        chosen_rank: rank,
        chosen: candidates[rank].clone(),
        strategy,
        distribution,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum SelectorError {
    Config(&'static str),
    EmptyPool,
    NoExamples,
    Diverged { epoch: usize },
}

impl fmt::Display for SelectorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelectorError::Config(msg) => write!(f, "invalid selector config: {msg}"),
            SelectorError::EmptyPool => write!(f, "candidate pool is empty"),
            SelectorError::NoExamples => write!(f, "no training examples"),
            SelectorError::Diverged { epoch } => {
                write!(f, "selector training diverged (non-finite loss) at epoch {epoch}")
            }
        }
    }
}

impl core::error::Error for SelectorError {}
