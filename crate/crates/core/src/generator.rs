//! The retrieval-augmented generator: a small encoder-decoder transformer
//! with two memory-fusion architectures.
//!
//! Joint: one encoder reads `x <sep> m`; each decoder layer cross-attends the
//! combined states. Dual: separate source and memory encoders; each decoder
//! layer attends the source states first, then the memory states.
//!
//! Training runs teacher-forced NLL through the tape. Decoding uses an
//! incremental per-token path with cached keys/values per layer; a dedicated
//! test pins its log-probabilities to the tape forward pass, so the two
//! implementations cannot drift apart silently.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Datastore, BOS_ID, EOS_ID, SEP_ID};
use crate::decode::{beam_search, best_hypothesis, BeamParams, Hypothesis, StepScorer};
use crate::linalg::{self, Mat};
use crate::nn::{
    self, bind_dec_layer, bind_enc_layer, bind_ln, Adam, DecLayerParams, EncLayerParams,
    ForwardCtx, LnParams, ParamCollection, VarDecLayer, VarEncLayer, VarLn,
};
use crate::retrieval::MemoryAssignment;
use crate::rng;
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Joint,
    Dual,
}

impl Architecture {
    pub fn parse(s: &str) -> Result<Self, GeneratorError> {
        match s {
            "joint" => Ok(Architecture::Joint),
            "dual" => Ok(Architecture::Dual),
            _ => Err(GeneratorError::Config("architecture must be joint or dual")),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Joint => "joint",
            Architecture::Dual => "dual",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub architecture: Architecture,
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub beam_width: usize,
    /// Pool size N for candidate mode.
    pub candidate_count: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            architecture: Architecture::Joint,
            layers: 2,
            model_dim: 64,
            heads: 4,
            ff_dim: 128,
            dropout: 0.1,
            max_len: 48,
            beam_width: 8,
            candidate_count: 8,
            seed: 17,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), GeneratorError> {
        if self.layers == 0 {
            return Err(GeneratorError::Config("layers must be positive"));
        }
        if self.model_dim == 0 || self.model_dim % self.heads != 0 {
            return Err(GeneratorError::Config("model_dim must be divisible by heads"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(GeneratorError::Config("dropout must lie in [0,1)"));
        }
        if self.candidate_count == 0 || self.candidate_count > self.beam_width {
            return Err(GeneratorError::Config("candidate_count must be in 1..=beam_width"));
        }
        if self.max_len < 4 {
            return Err(GeneratorError::Config("max_len too small"));
        }
        Ok(())
    }
}

/// All learned tensors of the generator. The embedding is shared by the
/// encoder(s), the decoder, and the output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub embed: Mat,
    pub enc: Vec<EncLayerParams>,
    pub enc_ln_f: LnParams,
    pub mem_enc: Option<Vec<EncLayerParams>>,
    pub mem_enc_ln_f: Option<LnParams>,
    pub dec: Vec<DecLayerParams>,
    pub dec_ln_f: LnParams,
}

impl GeneratorParams {
    pub fn init(config: &GeneratorConfig, vocab_size: usize, rng: &mut ChaCha8Rng) -> Self {
        let d = config.model_dim;
        let embed = crate::nn::uniform(rng, vocab_size, d, 0.05);
        let dual = config.architecture == Architecture::Dual;
        let enc =
            (0..config.layers).map(|_| EncLayerParams::init(rng, d, config.ff_dim)).collect();
        let mem_enc = dual.then(|| {
            (0..config.layers).map(|_| EncLayerParams::init(rng, d, config.ff_dim)).collect()
        });
        let dec = (0..config.layers)
            .map(|_| DecLayerParams::init(rng, d, config.ff_dim, dual))
            .collect();
        GeneratorParams {
            embed,
            enc,
            enc_ln_f: LnParams::init(d),
            mem_enc,
            mem_enc_ln_f: dual.then(|| LnParams::init(d)),
            dec,
            dec_ln_f: LnParams::init(d),
        }
    }
}

impl ParamCollection for GeneratorParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Mat)) {
        f("embed", &self.embed);
        for (i, l) in self.enc.iter().enumerate() {
            l.visit(&alloc::format!("enc.{i}"), f);
        }
        self.enc_ln_f.visit("enc_ln_f", f);
        if let (Some(layers), Some(ln)) = (&self.mem_enc, &self.mem_enc_ln_f) {
            for (i, l) in layers.iter().enumerate() {
                l.visit(&alloc::format!("mem_enc.{i}"), f);
            }
            ln.visit("mem_enc_ln_f", f);
        }
        for (i, l) in self.dec.iter().enumerate() {
            l.visit(&alloc::format!("dec.{i}"), f);
        }
        self.dec_ln_f.visit("dec_ln_f", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Mat)) {
        f("embed", &mut self.embed);
        for (i, l) in self.enc.iter_mut().enumerate() {
            l.visit_mut(&alloc::format!("enc.{i}"), f);
        }
        self.enc_ln_f.visit_mut("enc_ln_f", f);
        if let (Some(layers), Some(ln)) = (&mut self.mem_enc, &mut self.mem_enc_ln_f) {
            for (i, l) in layers.iter_mut().enumerate() {
                l.visit_mut(&alloc::format!("mem_enc.{i}"), f);
            }
            ln.visit_mut("mem_enc_ln_f", f);
        }
        for (i, l) in self.dec.iter_mut().enumerate() {
            l.visit_mut(&alloc::format!("dec.{i}"), f);
        }
        self.dec_ln_f.visit_mut("dec_ln_f", f);
    }
}

/// Tape handles for one forward pass, bound in the same order as
/// `GeneratorParams::visit`.
struct GenVars {
    embed: Var,
    enc: Vec<VarEncLayer>,
    enc_ln_f: VarLn,
    mem_enc: Option<Vec<VarEncLayer>>,
    mem_enc_ln_f: Option<VarLn>,
    dec: Vec<VarDecLayer>,
    dec_ln_f: VarLn,
}

impl GenVars {
    fn bind(t: &mut Tape, p: &GeneratorParams) -> Self {
        GenVars {
            embed: t.param(&p.embed),
            enc: p.enc.iter().map(|l| bind_enc_layer(t, l)).collect(),
            enc_ln_f: bind_ln(t, &p.enc_ln_f),
            mem_enc: p
                .mem_enc
                .as_ref()
                .map(|ls| ls.iter().map(|l| bind_enc_layer(t, l)).collect()),
            mem_enc_ln_f: p.mem_enc_ln_f.as_ref().map(|ln| bind_ln(t, ln)),
            dec: p.dec.iter().map(|l| bind_dec_layer(t, l)).collect(),
            dec_ln_f: bind_ln(t, &p.dec_ln_f),
        }
    }

    /// Vars in visit order, for gradient extraction.
    fn ordered(&self) -> Vec<Var> {
        let mut out = Vec::new();
        out.push(self.embed);
        for l in &self.enc {
            l.visit_vars(&mut |v| out.push(v));
        }
        self.enc_ln_f.visit_vars(&mut |v| out.push(v));
        if let (Some(layers), Some(ln)) = (&self.mem_enc, &self.mem_enc_ln_f) {
            for l in layers {
                l.visit_vars(&mut |v| out.push(v));
            }
            ln.visit_vars(&mut |v| out.push(v));
        }
        for l in &self.dec {
            l.visit_vars(&mut |v| out.push(v));
        }
        self.dec_ln_f.visit_vars(&mut |v| out.push(v));
        out
    }
}

/// Training metadata carried in the checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    /// Per-epoch validation loss (mean NLL per token).
    pub valid_losses: Vec<f64>,
    pub seed: u64,
}

impl TrainMeta {
    pub fn untrained(seed: u64) -> Self {
        TrainMeta {
            epochs_run: 0,
            best_epoch: 0,
            best_valid_loss: f64::INFINITY,
            valid_losses: Vec::new(),
            seed,
        }
    }
}

/// A generator with its configuration and training metadata; the in-memory
/// form of a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorCheckpoint {
    pub config: GeneratorConfig,
    pub vocab_size: usize,
    pub params: GeneratorParams,
    pub meta: TrainMeta,
}

/// Candidate pool for one source: ≤ N hypotheses, deduplicated, sorted by
/// total log-probability descending.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub source_id: String,
    pub candidates: Vec<Hypothesis>,
}

impl CandidatePool {
    pub fn new(source_id: String, mut hyps: Vec<Hypothesis>, n: usize) -> Self {
        let mut seen = alloc::collections::BTreeSet::new();
        hyps.retain(|h| seen.insert(h.tokens.clone()));
        hyps.sort_by(|a, b| {
            b.total_logprob
                .partial_cmp(&a.total_logprob)
                .unwrap_or(core::cmp::Ordering::Equal)
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        hyps.truncate(n);
        CandidatePool { source_id, candidates: hyps }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    /// Single best output under length normalization.
    Hypothesis,
    /// Top-N pool for selector training and memory selection.
    Candidates,
}

pub enum GenerateOutput {
    Hypothesis(Hypothesis),
    Pool(CandidatePool),
}

/// Knobs of the training loop, separate from the model shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub grad_clip: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { lr: 2e-3, batch_size: 16, max_epochs: 20, patience: 3, grad_clip: 1.0 }
    }
}

impl GeneratorCheckpoint {
    /// Fresh, untrained model with seeded initialization.
    pub fn init(config: GeneratorConfig, vocab_size: usize) -> Result<Self, GeneratorError> {
        config.validate()?;
        let mut r = rng::stream(config.seed, "gen-init");
        let params = GeneratorParams::init(&config, vocab_size, &mut r);
        let meta = TrainMeta::untrained(config.seed);
        Ok(GeneratorCheckpoint { config, vocab_size, params, meta })
    }

    pub fn from_parts(
        config: GeneratorConfig,
        vocab_size: usize,
        params: GeneratorParams,
        meta: TrainMeta,
    ) -> Result<Self, GeneratorError> {
        config.validate()?;
        if params.embed.rows != vocab_size || params.embed.cols != config.model_dim {
            return Err(GeneratorError::Config("parameter shapes do not match config"));
        }
        Ok(GeneratorCheckpoint { config, vocab_size, params, meta })
    }

    fn positions(&self) -> Mat {
        nn::positional_table(self.config.max_len, self.config.model_dim)
    }

    /// Encoder input for the joint architecture: `x <sep> m`, truncated to
    /// max_len by dropping memory tokens first so the source is never lost.
    pub fn joint_input(&self, x: &[u32], m: &[u32]) -> Vec<u32> {
        let cap = self.config.max_len;
        let mut out: Vec<u32> = x.iter().copied().take(cap.saturating_sub(1)).collect();
        out.push(SEP_ID);
        let room = cap - out.len();
        out.extend(m.iter().copied().take(room));
        out
    }

    /// Inputs for the dual architecture. Empty memory becomes a single
    /// separator token so the memory encoder always has a sequence.
    pub fn dual_inputs(&self, x: &[u32], m: &[u32]) -> (Vec<u32>, Vec<u32>) {
        let cap = self.config.max_len;
        let src: Vec<u32> = x.iter().copied().take(cap).collect();
        let mem: Vec<u32> = if m.is_empty() {
            vec![SEP_ID]
        } else {
            m.iter().copied().take(cap).collect()
        };
        (src, mem)
    }

    /// Encoder states for one example: combined states (joint) or source
    /// plus memory states (dual). Recorded on the given tape.
    fn encode_on_tape(
        &self,
        t: &mut Tape,
        ctx: &mut ForwardCtx,
        vars: &GenVars,
        pos: &Mat,
        x: &[u32],
        m: &[u32],
    ) -> (Var, Option<Var>) {
        match self.config.architecture {
            Architecture::Joint => {
                let ids = self.joint_input(x, m);
                let e = nn::embed_sequence(t, ctx, vars.embed, &ids, pos);
                let h = nn::encoder_stack(t, ctx, e, &vars.enc, &vars.enc_ln_f);
                (h, None)
            }
            Architecture::Dual => {
                let (src, mem) = self.dual_inputs(x, m);
                let e = nn::embed_sequence(t, ctx, vars.embed, &src, pos);
                let hs = nn::encoder_stack(t, ctx, e, &vars.enc, &vars.enc_ln_f);
                let em = nn::embed_sequence(t, ctx, vars.embed, &mem, pos);
                let hm = nn::encoder_stack(
                    t,
                    ctx,
                    em,
                    vars.mem_enc.as_ref().expect("dual config has memory encoder"),
                    vars.mem_enc_ln_f.as_ref().expect("dual config has memory encoder norm"),
                );
                (hs, Some(hm))
            }
        }
    }

    /// Teacher-forced log-probabilities [|y|+1, V] for targets `y ++ EOS`.
    fn forward_logp(
        &self,
        t: &mut Tape,
        ctx: &mut ForwardCtx,
        vars: &GenVars,
        pos: &Mat,
        x: &[u32],
        m: &[u32],
        y: &[u32],
    ) -> (Var, Vec<u32>) {
        let (src_states, mem_states) = self.encode_on_tape(t, ctx, vars, pos, x, m);
        let mut dec_in = Vec::with_capacity(y.len() + 1);
        dec_in.push(BOS_ID);
        dec_in.extend_from_slice(y);
        let mut targets = y.to_vec();
        targets.push(EOS_ID);

        let e = nn::embed_sequence(t, ctx, vars.embed, &dec_in, pos);
        let h = nn::decoder_stack(t, ctx, e, &vars.dec, &vars.dec_ln_f, src_states, mem_states);
        let logits = t.matmul_t(h, vars.embed);
        let logp = t.log_softmax_rows(logits);
        (logp, targets)
    }

    fn check_example(&self, y: &[u32]) -> Result<(), GeneratorError> {
        if y.is_empty() {
            return Err(GeneratorError::EmptyTarget);
        }
        if y.len() + 2 > self.config.max_len {
            return Err(GeneratorError::Config("target longer than max_len allows"));
        }
        Ok(())
    }

    /// Summed NLL of `y` given `x` and memory `m`, with the per-token
    /// probabilities p(y_t | x, m, y_<t). Deterministic (no dropout).
    pub fn forward_nll(
        &self,
        x: &[u32],
        m: &[u32],
        y: &[u32],
    ) -> Result<(f64, Vec<f64>), GeneratorError> {
        self.check_example(y)?;
        let pos = self.positions();
        let mut t = Tape::new();
        let mut ctx = ForwardCtx::eval(self.config.heads);
        let vars = GenVars::bind(&mut t, &self.params);
        let (logp, targets) = self.forward_logp(&mut t, &mut ctx, &vars, &pos, x, m, y);
        let loss = t.nll_sum(logp, &targets);
        let v = t.shape(logp).1;
        let probs: Vec<f64> = targets
            .iter()
            .enumerate()
            .map(|(r, &tok)| libm::exp(t.value(logp)[r * v + tok as usize]))
            .collect();
        Ok((t.value(loss)[0], probs))
    }

    /// Per-token probabilities of `y ++ EOS` under teacher forcing.
    pub fn sequence_token_probs(
        &self,
        x: &[u32],
        m: &[u32],
        y: &[u32],
    ) -> Result<Vec<f64>, GeneratorError> {
        Ok(self.forward_nll(x, m, y)?.1)
    }

    /// The `forward_nll` loss together with its analytic parameter
    /// gradients, one matrix per tensor in visit order. Deterministic;
    /// meant for gradient verification against finite differences.
    pub fn loss_and_param_grads(
        &self,
        x: &[u32],
        m: &[u32],
        y: &[u32],
    ) -> Result<(f64, Vec<Mat>), GeneratorError> {
        self.check_example(y)?;
        let pos = self.positions();
        let mut t = Tape::new();
        let mut ctx = ForwardCtx::eval(self.config.heads);
        let vars = GenVars::bind(&mut t, &self.params);
        let (logp, targets) = self.forward_logp(&mut t, &mut ctx, &vars, &pos, x, m, y);
        let loss = t.nll_sum(logp, &targets);
        let grads = t.backward(loss);
        let mats = vars
            .ordered()
            .iter()
            .zip(self.params.tensor_specs())
            .map(|(&v, (_, rows, cols))| Mat::from_vec(rows, cols, grads.grad_or_zeros(v, rows * cols)))
            .collect();
        Ok((t.value(loss)[0], mats))
    }

    /// Decode for one source. Hypothesis mode returns the best sequence
    /// under length normalization; candidate mode returns the top-N pool.
    pub fn generate(
        &self,
        source_id: &str,
        x: &[u32],
        m: &[u32],
        mode: DecodeMode,
    ) -> Result<GenerateOutput, GeneratorError> {
        let scorer = self.decode_scorer(x, m);
        let params = BeamParams {
            width: self.config.beam_width,
            max_len: self.config.max_len - 2,
            alpha: 0.6,
            bos: BOS_ID,
            eos: EOS_ID,
        };
        let hyps = beam_search(&scorer, &params);
        if hyps.is_empty() {
            return Err(GeneratorError::DecodeFailed);
        }
        Ok(match mode {
            DecodeMode::Hypothesis => GenerateOutput::Hypothesis(
                best_hypothesis(hyps, params.alpha).expect("non-empty hypothesis set"),
            ),
            DecodeMode::Candidates => GenerateOutput::Pool(CandidatePool::new(
                String::from(source_id),
                hyps,
                self.config.candidate_count,
            )),
        })
    }

    pub fn decode_hypothesis(&self, x: &[u32], m: &[u32]) -> Result<Hypothesis, GeneratorError> {
        match self.generate("", x, m, DecodeMode::Hypothesis)? {
            GenerateOutput::Hypothesis(h) => Ok(h),
            GenerateOutput::Pool(_) => unreachable!("hypothesis mode returns a hypothesis"),
        }
    }

    pub fn decode_pool(
        &self,
        source_id: &str,
        x: &[u32],
        m: &[u32],
    ) -> Result<CandidatePool, GeneratorError> {
        match self.generate(source_id, x, m, DecodeMode::Candidates)? {
            GenerateOutput::Pool(p) => Ok(p),
            GenerateOutput::Hypothesis(_) => unreachable!("candidate mode returns a pool"),
        }
    }

    /// Build the incremental scorer: run the encoder(s) once, precompute
    /// cross-attention keys/values per decoder layer.
    fn decode_scorer(&self, x: &[u32], m: &[u32]) -> GenScorer<'_> {
        let pos = self.positions();
        let mut t = Tape::new();
        let mut ctx = ForwardCtx::eval(self.config.heads);
        let vars = GenVars::bind(&mut t, &self.params);
        let (src_var, mem_var) = self.encode_on_tape(&mut t, &mut ctx, &vars, &pos, x, m);
        let to_mat = |t: &Tape, v: Var| {
            let (r, c) = t.shape(v);
            Mat::from_vec(r, c, t.value(v).to_vec())
        };
        let src_states = to_mat(&t, src_var);
        let mem_states = mem_var.map(|v| to_mat(&t, v));

        let project = |states: &Mat, attn: &nn::AttnParams| {
            let mut k = Mat::zeros(states.rows, self.config.model_dim);
            linalg::matmul_acc(&mut k.data, &states.data, &attn.wk.data, states.rows, states.cols, attn.wk.cols);
            for r in 0..k.rows {
                for c in 0..k.cols {
                    k.data[r * k.cols + c] += attn.bk.data[c];
                }
            }
            let mut v = Mat::zeros(states.rows, self.config.model_dim);
            linalg::matmul_acc(&mut v.data, &states.data, &attn.wv.data, states.rows, states.cols, attn.wv.cols);
            for r in 0..v.rows {
                for c in 0..v.cols {
                    v.data[r * v.cols + c] += attn.bv.data[c];
                }
            }
            (k, v)
        };
        let mut cross_src = Vec::with_capacity(self.params.dec.len());
        let mut cross_mem = Vec::new();
        for layer in &self.params.dec {
            cross_src.push(project(&src_states, &layer.cross_src));
            if let (Some(attn), Some(mem)) = (&layer.cross_mem, &mem_states) {
                cross_mem.push(project(mem, attn));
            }
        }
        GenScorer { gen: self, pos, cross_src, cross_mem }
    }

    /// Train on the given split with assigned memories; early stopping on
    /// teacher-forced validation loss. Returns the best checkpoint with its
    /// parameters rounded through f32 so a saved-and-reloaded copy is
    /// bit-identical.
    pub fn train(
        train: &Datastore,
        train_memories: &[MemoryAssignment],
        valid: &Datastore,
        valid_memories: &[MemoryAssignment],
        config: GeneratorConfig,
        opts: &TrainOptions,
    ) -> Result<GeneratorCheckpoint, GeneratorError> {
        config.validate()?;
        let vocab = &train.vocabulary;
        let encode_split = |ds: &Datastore, mems: &[MemoryAssignment]| -> Result<Vec<Example>, GeneratorError> {
            ds.pairs
                .iter()
                .map(|p| {
                    let mem = mems
                        .iter()
                        .find(|m| m.pair_id == p.id)
                        .ok_or_else(|| GeneratorError::MissingMemory { id: p.id.clone() })?;
                    Ok(Example {
                        x: vocab.encode(&p.source),
                        m: vocab.encode(&mem.memory),
                        y: vocab.encode(&p.target),
                    })
                })
                .collect()
        };
        let train_ex = encode_split(train, train_memories)?;
        let valid_ex = encode_split(valid, valid_memories)?;
        let longest = train_ex.iter().map(|e| e.y.len()).max().unwrap_or(0);
        if config.max_len < longest + 2 {
            return Err(GeneratorError::Config("max_len below longest training target + 2"));
        }

        let mut model = GeneratorCheckpoint::init(config.clone(), vocab.len())?;
        let pos = model.positions();
        let mut opt = Adam::new(opts.lr, opts.grad_clip);
        let mut shuffle_rng = rng::stream(config.seed, "gen-shuffle");
        let mut dropout_rng = rng::stream(config.seed, "gen-dropout");

        let mut best_params = model.params.clone();
        let mut best_loss = f64::INFINITY;
        let mut best_epoch = 0;
        let mut stale = 0;
        let mut valid_losses = Vec::new();
        let mut epochs_run = 0;

        for epoch in 1..=opts.max_epochs {
            epochs_run = epoch;
            let mut order: Vec<usize> = (0..train_ex.len()).collect();
            order.shuffle(&mut shuffle_rng);

            for batch in order.chunks(opts.batch_size) {
                let mut accum: Vec<Vec<f64>> = Vec::new();
                let mut token_count = 0usize;
                let mut batch_loss = 0.0;
                for &i in batch {
                    let ex = &train_ex[i];
                    model.check_example(&ex.y)?;
                    let mut t = Tape::new();
                    let mut ctx =
                        ForwardCtx::train(config.heads, config.dropout, &mut dropout_rng);
                    let vars = GenVars::bind(&mut t, &model.params);
                    let (logp, targets) =
                        model.forward_logp(&mut t, &mut ctx, &vars, &pos, &ex.x, &ex.m, &ex.y);
                    let loss = t.nll_sum(logp, &targets);
                    batch_loss += t.value(loss)[0];
                    token_count += targets.len();
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
                if !batch_loss.is_finite() {
                    return Err(GeneratorError::Diverged { epoch });
                }
                let scale = 1.0 / token_count.max(1) as f64;
                for g in accum.iter_mut() {
                    for v in g.iter_mut() {
                        *v *= scale;
                    }
                }
                opt.step(&mut model.params, &accum);
            }

            let mut vloss = 0.0;
            let mut vtokens = 0usize;
            for ex in &valid_ex {
                let (l, _) = model.forward_nll(&ex.x, &ex.m, &ex.y)?;
                vloss += l;
                vtokens += ex.y.len() + 1;
            }
            let vloss = vloss / vtokens.max(1) as f64;
            if !vloss.is_finite() {
                return Err(GeneratorError::Diverged { epoch });
            }
            valid_losses.push(vloss);
            log::info!("generator epoch {epoch}: valid loss {vloss:.4}");

            if vloss < best_loss - 1e-9 {
                best_loss = vloss;
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
        nn::quantize_params(&mut model.params);
        model.meta = TrainMeta {
            epochs_run,
            best_epoch,
            best_valid_loss: best_loss,
            valid_losses,
            seed: config.seed,
        };
        Ok(model)
    }
}

struct Example {
    x: Vec<u32>,
    m: Vec<u32>,
    y: Vec<u32>,
}

// ── Incremental decoding ──

/// Per-source decoding scorer with precomputed cross-attention keys/values.
pub struct GenScorer<'g> {
    gen: &'g GeneratorCheckpoint,
    pos: Mat,
    /// (K, V) over source states, one per decoder layer.
    cross_src: Vec<(Mat, Mat)>,
    /// (K, V) over memory states (dual only).
    cross_mem: Vec<(Mat, Mat)>,
}

/// Growing per-layer self-attention caches.
#[derive(Clone)]
pub struct GenState {
    step: usize,
    self_k: Vec<Mat>,
    self_v: Vec<Mat>,
}

fn ln_row(x: &[f64], p: &LnParams) -> Vec<f64> {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let inv = 1.0 / libm::sqrt(var + 1e-5);
    (0..n).map(|c| (x[c] - mean) * inv * p.gain.data[c] + p.bias.data[c]).collect()
}

fn linear_row(x: &[f64], w: &Mat, b: &Mat) -> Vec<f64> {
    let mut out = b.data.clone();
    linalg::matmul_acc(&mut out, x, &w.data, 1, w.rows, w.cols);
    out
}

/// One query row attending over cached keys/values, multi-head.
fn attn_row(q: &[f64], k: &Mat, v: &Mat, heads: usize) -> Vec<f64> {
    let d = q.len();
    let dk = d / heads;
    let scale = 1.0 / libm::sqrt(dk as f64);
    let t = k.rows;
    let mut out = vec![0.0; d];
    let mut scores = vec![0.0; t];
    for h in 0..heads {
        let off = h * dk;
        for (pos, s) in scores.iter_mut().enumerate() {
            let krow = &k.row(pos)[off..off + dk];
            let mut dot = 0.0;
            for (a, b) in q[off..off + dk].iter().zip(krow) {
                dot += a * b;
            }
            *s = dot * scale;
        }
        linalg::softmax_in_place(&mut scores);
        for (pos, s) in scores.iter().enumerate() {
            let vrow = &v.row(pos)[off..off + dk];
            for (o, val) in out[off..off + dk].iter_mut().zip(vrow) {
                *o += s * val;
            }
        }
    }
    out
}

impl StepScorer for GenScorer<'_> {
    type State = GenState;

    fn initial_state(&self) -> GenState {
        let layers = self.gen.params.dec.len();
        let d = self.gen.config.model_dim;
        GenState {
            step: 0,
            self_k: (0..layers).map(|_| Mat::zeros(0, d)).collect(),
            self_v: (0..layers).map(|_| Mat::zeros(0, d)).collect(),
        }
    }

    fn step(&self, state: &mut GenState, token: u32) -> Vec<f64> {
        let gen = self.gen;
        let d = gen.config.model_dim;
        let heads = gen.config.heads;
        let sqrt_d = libm::sqrt(d as f64);
        assert!(state.step < gen.config.max_len, "decode past position table");

        let erow = gen.params.embed.row(token as usize);
        let prow = self.pos.row(state.step);
        let mut x: Vec<f64> = (0..d).map(|c| erow[c] * sqrt_d + prow[c]).collect();

        for (l, layer) in gen.params.dec.iter().enumerate() {
            // Causal self-attention over the growing cache.
            let h = ln_row(&x, &layer.ln_self);
            let q = linear_row(&h, &layer.self_attn.wq, &layer.self_attn.bq);
            let k_new = linear_row(&h, &layer.self_attn.wk, &layer.self_attn.bk);
            let v_new = linear_row(&h, &layer.self_attn.wv, &layer.self_attn.bv);
            let cache_k = &mut state.self_k[l];
            cache_k.data.extend_from_slice(&k_new);
            cache_k.rows += 1;
            let cache_v = &mut state.self_v[l];
            cache_v.data.extend_from_slice(&v_new);
            cache_v.rows += 1;
            let o = attn_row(&q, &state.self_k[l], &state.self_v[l], heads);
            let o = linear_row(&o, &layer.self_attn.wo, &layer.self_attn.bo);
            for (xv, ov) in x.iter_mut().zip(&o) {
                *xv += ov;
            }

            // Cross-attention over source states.
            let h = ln_row(&x, &layer.ln_src);
            let q = linear_row(&h, &layer.cross_src.wq, &layer.cross_src.bq);
            let (ck, cv) = &self.cross_src[l];
            let o = attn_row(&q, ck, cv, heads);
            let o = linear_row(&o, &layer.cross_src.wo, &layer.cross_src.bo);
            for (xv, ov) in x.iter_mut().zip(&o) {
                *xv += ov;
            }

            // Cross-attention over memory states (dual architecture).
            if let (Some(ln), Some(attn)) = (&layer.ln_mem, &layer.cross_mem) {
                let h = ln_row(&x, ln);
                let q = linear_row(&h, &attn.wq, &attn.bq);
                let (ck, cv) = &self.cross_mem[l];
                let o = attn_row(&q, ck, cv, heads);
                let o = linear_row(&o, &attn.wo, &attn.bo);
                for (xv, ov) in x.iter_mut().zip(&o) {
                    *xv += ov;
                }
            }

            let h = ln_row(&x, &layer.ln_ff);
            let h1 = linear_row(&h, &layer.ff.w1, &layer.ff.b1);
            let h1: Vec<f64> = h1.iter().map(|&v| v.max(0.0)).collect();
            let h2 = linear_row(&h1, &layer.ff.w2, &layer.ff.b2);
            for (xv, ov) in x.iter_mut().zip(&h2) {
                *xv += ov;
            }
        }

        let h = ln_row(&x, &gen.params.dec_ln_f);
        let embed = &gen.params.embed;
        let mut logits = vec![0.0; embed.rows];
        linalg::matmul_bt_acc(&mut logits, &h, &embed.data, 1, d, embed.rows);
        linalg::log_softmax_in_place(&mut logits);
        state.step += 1;
        logits
    }

    fn vocab_size(&self) -> usize {
        self.gen.vocab_size
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GeneratorError {
    Config(&'static str),
    EmptyTarget,
    MissingMemory { id: String },
    Diverged { epoch: usize },
    DecodeFailed,
}

impl fmt::Display for GeneratorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeneratorError::Config(msg) => write!(f, "invalid generator config: {msg}"),
            GeneratorError::EmptyTarget => write!(f, "target sequence is empty"),
            GeneratorError::MissingMemory { id } => {
                write!(f, "no memory assignment covers pair {id}")
            }
            GeneratorError::Diverged { epoch } => {
                write!(f, "training diverged (non-finite loss) at epoch {epoch}")
            }
            GeneratorError::DecodeFailed => write!(f, "beam search produced no hypotheses"),
        }
    }
}

impl core::error::Error for GeneratorError {}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::FIRST_REGULAR_ID;
    use alloc::string::ToString;

    fn tiny_config(arch: Architecture) -> GeneratorConfig {
        GeneratorConfig {
            architecture: arch,
            layers: 2,
            model_dim: 16,
            heads: 2,
            ff_dim: 24,
            dropout: 0.0,
            max_len: 16,
            beam_width: 4,
            candidate_count: 4,
            seed: 11,
        }
    }

    const V: usize = 30;

    fn ids(vals: &[u32]) -> Vec<u32> {
        vals.iter().map(|&v| v + FIRST_REGULAR_ID).collect()
    }

    #[test]
    fn untrained_loss_is_near_uniform() {
        for arch in [Architecture::Joint, Architecture::Dual] {
            let model = GeneratorCheckpoint::init(tiny_config(arch), V).unwrap();
            let x = ids(&[1, 2, 3, 4]);
            let m = ids(&[5, 6]);
            let y = ids(&[7, 8, 9]);
            let (loss, probs) = model.forward_nll(&x, &m, &y).unwrap();
            let expect = (y.len() + 1) as f64 * libm::log(V as f64);
            assert!(
                (loss - expect).abs() / expect < 0.05,
                "{:?}: loss {loss} vs uniform {expect}",
                arch
            );
            for p in &probs {
                assert!((p - 1.0 / V as f64).abs() < 0.02, "prob {p} far from uniform");
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let model = GeneratorCheckpoint::init(tiny_config(Architecture::Joint), V).unwrap();
        let x = ids(&[1, 2, 3]);
        let m = ids(&[4, 4, 5]);
        let y = ids(&[6, 7]);
        let a = model.forward_nll(&x, &m, &y).unwrap();
        let b = model.forward_nll(&x, &m, &y).unwrap();
        assert_eq!(a, b);
        // Duplicated memory changes the loss but keeps it finite.
        let m2 = ids(&[4, 4, 5, 4, 4, 5]);
        let (l2, _) = model.forward_nll(&x, &m2, &y).unwrap();
        assert!(l2.is_finite());
        assert_ne!(a.0, l2);
    }

    #[test]
    fn empty_target_is_an_error() {
        let model = GeneratorCheckpoint::init(tiny_config(Architecture::Joint), V).unwrap();
        assert_eq!(model.forward_nll(&ids(&[1]), &[], &[]), Err(GeneratorError::EmptyTarget));
    }

    #[test]
    fn probs_are_consistent_with_loss() {
        for arch in [Architecture::Joint, Architecture::Dual] {
            let model = GeneratorCheckpoint::init(tiny_config(arch), V).unwrap();
            let x = ids(&[1, 2, 3, 4, 5]);
            let m = ids(&[6, 7, 8]);
            let y = ids(&[9, 10, 11, 12]);
            let (loss, probs) = model.forward_nll(&x, &m, &y).unwrap();
            let recon: f64 = probs.iter().map(|p| -libm::log(*p)).sum();
            assert!((loss - recon).abs() < 1e-6, "{arch:?}: {loss} vs {recon}");
        }
    }

    /// Central finite differences over a deterministic sample of elements in
    /// every tensor, both architectures.
    #[test]
    fn gradients_match_finite_differences() {
        for arch in [Architecture::Joint, Architecture::Dual] {
            let model = GeneratorCheckpoint::init(tiny_config(arch), V).unwrap();
            let x = ids(&[1, 2, 3]);
            let m = ids(&[4, 5]);
            let y = ids(&[6, 7]);
            let pos = model.positions();

            let loss_of = |params: &GeneratorParams| -> f64 {
                let probe = GeneratorCheckpoint {
                    config: model.config.clone(),
                    vocab_size: model.vocab_size,
                    params: params.clone(),
                    meta: model.meta.clone(),
                };
                let mut t = Tape::new();
                let mut ctx = ForwardCtx::eval(probe.config.heads);
                let vars = GenVars::bind(&mut t, &probe.params);
                let (logp, targets) =
                    probe.forward_logp(&mut t, &mut ctx, &vars, &pos, &x, &m, &y);
                let loss = t.nll_sum(logp, &targets);
                t.value(loss)[0]
            };

            let mut t = Tape::new();
            let mut ctx = ForwardCtx::eval(model.config.heads);
            let vars = GenVars::bind(&mut t, &model.params);
            let (logp, targets) = model.forward_logp(&mut t, &mut ctx, &vars, &pos, &x, &m, &y);
            let loss = t.nll_sum(logp, &targets);
            let grads = t.backward(loss);
            let ordered = vars.ordered();

            let specs = model.params.tensor_specs();
            assert_eq!(specs.len(), ordered.len());
            // Small step: 1e-4 can cross a relu kink and corrupt the quotient.
            let eps = 1e-6;
            for (ti, (name, rows, cols)) in specs.iter().enumerate() {
                let len = rows * cols;
                let analytic = grads.grad_or_zeros(ordered[ti], len);
                // A deterministic handful of elements per tensor.
                let picks = [0, len / 3, len / 2, 2 * len / 3, len - 1];
                for &j in picks.iter() {
                    let j = j.min(len - 1);
                    let mut plus = model.params.clone();
                    let mut minus = model.params.clone();
                    let mut k = 0;
                    plus.visit_mut(&mut |_, mat| {
                        if k == ti {
                            mat.data[j] += eps;
                        }
                        k += 1;
                    });
                    k = 0;
                    minus.visit_mut(&mut |_, mat| {
                        if k == ti {
                            mat.data[j] -= eps;
                        }
                        k += 1;
                    });
                    let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
                    let a = analytic[j];
                    if a.abs() < 1e-8 && fd.abs() < 1e-8 {
                        continue;
                    }
                    let rel = (a - fd).abs() / a.abs().max(fd.abs());
                    assert!(
                        rel < 1e-3,
                        "{arch:?} {name}[{j}]: analytic {a} vs fd {fd} (rel {rel})"
                    );
                }
            }
        }
    }

    /// The incremental cached decoder must produce the same per-token
    /// log-probabilities as the tape forward pass.
    #[test]
    fn incremental_decode_matches_tape_forward() {
        for arch in [Architecture::Joint, Architecture::Dual] {
            let model = GeneratorCheckpoint::init(tiny_config(arch), V).unwrap();
            let x = ids(&[1, 2, 3, 4]);
            let m = ids(&[5, 6, 7]);
            let y = ids(&[8, 9, 10, 11, 12]);
            let probs = model.sequence_token_probs(&x, &m, &y).unwrap();

            let scorer = model.decode_scorer(&x, &m);
            let mut state = scorer.initial_state();
            let mut dec_in = vec![BOS_ID];
            dec_in.extend_from_slice(&y);
            let mut targets = y.clone();
            targets.push(EOS_ID);
            for (i, (tok_in, tok_out)) in dec_in.iter().zip(&targets).enumerate() {
                let lp = scorer.step(&mut state, *tok_in);
                let p = libm::exp(lp[*tok_out as usize]);
                let expect = probs[i];
                assert!(
                    (p - expect).abs() < 1e-9,
                    "{arch:?} token {tok_out}: cached {p} vs tape {expect}"
                );
                // Distribution sanity at every step.
                let sum: f64 = lp.iter().map(|l| libm::exp(*l)).sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn beam_one_equals_greedy_on_model() {
        let mut config = tiny_config(Architecture::Joint);
        config.beam_width = 1;
        config.candidate_count = 1;
        let model = GeneratorCheckpoint::init(config, V).unwrap();
        let x = ids(&[1, 2, 3]);
        let m = ids(&[4, 5]);
        let hyp = model.decode_hypothesis(&x, &m).unwrap();

        let scorer = model.decode_scorer(&x, &m);
        let mut state = scorer.initial_state();
        let mut tok = BOS_ID;
        let mut greedy = Vec::new();
        for _ in 0..model.config.max_len - 2 {
            let lp = scorer.step(&mut state, tok);
            let arg = lp
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i as u32)
                .unwrap();
            greedy.push(arg);
            tok = arg;
            if arg == EOS_ID {
                break;
            }
        }
        assert_eq!(hyp.tokens, greedy);
    }

    #[test]
    fn candidate_pool_contract_holds() {
        let model = GeneratorCheckpoint::init(tiny_config(Architecture::Dual), V).unwrap();
        let pool = model.decode_pool("s-1", &ids(&[1, 2]), &ids(&[3])).unwrap();
        assert_eq!(pool.source_id, "s-1");
        assert!(!pool.candidates.is_empty());
        assert!(pool.candidates.len() <= model.config.candidate_count);
        let mut seen = alloc::collections::BTreeSet::new();
        for c in &pool.candidates {
            assert!(seen.insert(c.tokens.clone()));
        }
        for w in pool.candidates.windows(2) {
            assert!(w[0].total_logprob >= w[1].total_logprob);
        }
    }

    #[test]
    fn joint_truncation_preserves_source() {
        let mut config = tiny_config(Architecture::Joint);
        config.max_len = 10;
        let model = GeneratorCheckpoint::init(config, V).unwrap();
        let x = ids(&[1, 2, 3, 4, 5, 6]);
        let m = ids(&[7, 8, 9, 10, 11, 12]);
        let joint = model.joint_input(&x, &m);
        assert!(joint.len() <= 10);
        assert_eq!(&joint[..6], &x[..]);
        assert_eq!(joint[6], SEP_ID);
        assert_eq!(&joint[7..], &m[..3]);

        // Source alone above the cap: keep a prefix and the separator.
        let long_x = ids(&[1; 12]);
        let joint = model.joint_input(&long_x, &m);
        assert_eq!(joint.len(), 10);
        assert_eq!(joint[9 - 1], 1 + FIRST_REGULAR_ID);
        assert_eq!(joint[9], SEP_ID);
    }

    #[test]
    fn dual_empty_memory_uses_separator_placeholder() {
        let model = GeneratorCheckpoint::init(tiny_config(Architecture::Dual), V).unwrap();
        let (_, mem) = model.dual_inputs(&ids(&[1]), &[]);
        assert_eq!(mem, vec![SEP_ID]);
        // And the forward pass accepts it.
        let (loss, _) = model.forward_nll(&ids(&[1, 2]), &[], &ids(&[3])).unwrap();
        assert!(loss.is_finite());
    }

    #[test]
    fn quantized_params_survive_f32_round_trip() {
        let mut model = GeneratorCheckpoint::init(tiny_config(Architecture::Joint), V).unwrap();
        nn::quantize_params(&mut model.params);
        let x = ids(&[1, 2]);
        let m = ids(&[3]);
        let y = ids(&[4, 5]);
        let before = model.forward_nll(&x, &m, &y).unwrap();

        // Simulate a checkpoint save/load: every value through f32.
        let mut reloaded = model.clone();
        reloaded.params.visit_mut(&mut |_, mat| {
            for v in mat.data.iter_mut() {
                let f = *v as f32;
                *v = f as f64;
            }
        });
        let after = reloaded.forward_nll(&x, &m, &y).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let mut c = tiny_config(Architecture::Joint);
        c.model_dim = 15;
        assert!(c.validate().is_err());
        let mut c = tiny_config(Architecture::Joint);
        c.candidate_count = 10;
        assert!(c.validate().is_err());
        assert!(Architecture::parse("joint").is_ok());
        assert!(Architecture::parse("triple").is_err());
    }

    #[test]
    fn missing_memory_assignment_fails_training() {
        use crate::corpus::{Split, TextPair, Vocabulary};
        let pairs = vec![TextPair {
            id: "t-0".to_string(),
            source: vec!["a".to_string()],
            target: vec!["b".to_string()],
            template_id: None,
        }];
        let vocab = Vocabulary::build(&pairs);
        let ds = Datastore::new(pairs, Split::Train, vocab).unwrap();
        let err = GeneratorCheckpoint::train(
            &ds,
            &[],
            &ds,
            &[],
            tiny_config(Architecture::Joint),
            &TrainOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, GeneratorError::MissingMemory { .. }));
    }
}
