//! Transformer building blocks shared by the generator and the selector.
//!
//! Parameters live in plain structs of [`Mat`]; each model walks them in a
//! fixed declared order via [`ParamCollection`], and that same order is used
//! for optimizer state, gradient extraction, and checkpoint serialization.
//! Forward passes are recorded on a [`Tape`]; the `Var` mirror structs hold
//! the bound tape handles for one pass.
//!
//! All blocks are pre-norm: `x + Sublayer(LN(x))`, with a final layer norm
//! after the stack.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::linalg::Mat;
use crate::tape::{Tape, Var};

/// Additive mask value for blocked attention positions.
const NEG_INF: f64 = -1e9;

/// Walk every parameter matrix in a fixed declared order.
pub trait ParamCollection {
    fn visit(&self, f: &mut dyn FnMut(&str, &Mat));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Mat));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, m| n += m.data.len());
        n
    }

    fn tensor_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _| n += 1);
        n
    }

    /// (name, rows, cols) for every tensor, in visit order.
    fn tensor_specs(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        self.visit(&mut |name, m| out.push((String::from(name), m.rows, m.cols)));
        out
    }
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let limit = libm::sqrt(6.0 / (rows + cols) as f64);
    let data = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
    Mat::from_vec(rows, cols, data)
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, limit: f64) -> Mat {
    let data = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
    Mat::from_vec(rows, cols, data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LnParams {
    pub gain: Mat,
    pub bias: Mat,
}

impl LnParams {
    pub fn init(d: usize) -> Self {
        LnParams { gain: Mat::from_vec(1, d, vec![1.0; d]), bias: Mat::zeros(1, d) }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Mat)) {
        f(&format!("{prefix}.gain"), &self.gain);
        f(&format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Mat)) {
        f(&format!("{prefix}.gain"), &mut self.gain);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttnParams {
    pub wq: Mat,
    pub bq: Mat,
    pub wk: Mat,
    pub bk: Mat,
    pub wv: Mat,
    pub bv: Mat,
    pub wo: Mat,
    pub bo: Mat,
}

impl AttnParams {
    pub fn init(rng: &mut ChaCha8Rng, d: usize) -> Self {
        AttnParams {
            wq: glorot(rng, d, d),
            bq: Mat::zeros(1, d),
            wk: glorot(rng, d, d),
            bk: Mat::zeros(1, d),
            wv: glorot(rng, d, d),
            bv: Mat::zeros(1, d),
            wo: glorot(rng, d, d),
            bo: Mat::zeros(1, d),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Mat)) {
        f(&format!("{prefix}.wq"), &self.wq);
        f(&format!("{prefix}.bq"), &self.bq);
        f(&format!("{prefix}.wk"), &self.wk);
        f(&format!("{prefix}.bk"), &self.bk);
        f(&format!("{prefix}.wv"), &self.wv);
        f(&format!("{prefix}.bv"), &self.bv);
        f(&format!("{prefix}.wo"), &self.wo);
        f(&format!("{prefix}.bo"), &self.bo);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Mat)) {
        f(&format!("{prefix}.wq"), &mut self.wq);
        f(&format!("{prefix}.bq"), &mut self.bq);
        f(&format!("{prefix}.wk"), &mut self.wk);
        f(&format!("{prefix}.bk"), &mut self.bk);
        f(&format!("{prefix}.wv"), &mut self.wv);
        f(&format!("{prefix}.bv"), &mut self.bv);
        f(&format!("{prefix}.wo"), &mut self.wo);
        f(&format!("{prefix}.bo"), &mut self.bo);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FfParams {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

impl FfParams {
    pub fn init(rng: &mut ChaCha8Rng, d: usize, ff: usize) -> Self {
        FfParams {
            w1: glorot(rng, d, ff),
            b1: Mat::zeros(1, ff),
            w2: glorot(rng, ff, d),
            b2: Mat::zeros(1, d),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Mat)) {
        f(&format!("{prefix}.w1"), &self.w1);
        f(&format!("{prefix}.b1"), &self.b1);
        f(&format!("{prefix}.w2"), &self.w2);
        f(&format!("{prefix}.b2"), &self.b2);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Mat)) {
        f(&format!("{prefix}.w1"), &mut self.w1);
        f(&format!("{prefix}.b1"), &mut self.b1);
        f(&format!("{prefix}.w2"), &mut self.w2);
        f(&format!("{prefix}.b2"), &mut self.b2);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncLayerParams {
    pub ln1: LnParams,
    pub attn: AttnParams,
    pub ln2: LnParams,
    pub ff: FfParams,
}

impl EncLayerParams {
    pub fn init(rng: &mut ChaCha8Rng, d: usize, ff: usize) -> Self {
        EncLayerParams {
            ln1: LnParams::init(d),
            attn: AttnParams::init(rng, d),
            ln2: LnParams::init(d),
            ff: FfParams::init(rng, d, ff),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Mat)) {
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
        self.ff.visit(&format!("{prefix}.ff"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Mat)) {
        self.ln1.visit_mut(&format!("{prefix}.ln1"), f);
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), f);
        self.ff.visit_mut(&format!("{prefix}.ff"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecLayerParams {
    pub ln_self: LnParams,
    pub self_attn: AttnParams,
    pub ln_src: LnParams,
    pub cross_src: AttnParams,
    /// Present in the dual architecture only.
    pub ln_mem: Option<LnParams>,
    pub cross_mem: Option<AttnParams>,
    pub ln_ff: LnParams,
    pub ff: FfParams,
}

impl DecLayerParams {
    pub fn init(rng: &mut ChaCha8Rng, d: usize, ff: usize, dual: bool) -> Self {
        DecLayerParams {
            ln_self: LnParams::init(d),
            self_attn: AttnParams::init(rng, d),
            ln_src: LnParams::init(d),
            cross_src: AttnParams::init(rng, d),
            ln_mem: dual.then(|| LnParams::init(d)),
            cross_mem: dual.then(|| AttnParams::init(rng, d)),
            ln_ff: LnParams::init(d),
            ff: FfParams::init(rng, d, ff),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Mat)) {
        self.ln_self.visit(&format!("{prefix}.ln_self"), f);
        self.self_attn.visit(&format!("{prefix}.self_attn"), f);
        self.ln_src.visit(&format!("{prefix}.ln_src"), f);
        self.cross_src.visit(&format!("{prefix}.cross_src"), f);
        if let (Some(ln), Some(attn)) = (&self.ln_mem, &self.cross_mem) {
            ln.visit(&format!("{prefix}.ln_mem"), f);
            attn.visit(&format!("{prefix}.cross_mem"), f);
        }
        self.ln_ff.visit(&format!("{prefix}.ln_ff"), f);
        self.ff.visit(&format!("{prefix}.ff"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Mat)) {
        self.ln_self.visit_mut(&format!("{prefix}.ln_self"), f);
        self.self_attn.visit_mut(&format!("{prefix}.self_attn"), f);
        self.ln_src.visit_mut(&format!("{prefix}.ln_src"), f);
        self.cross_src.visit_mut(&format!("{prefix}.cross_src"), f);
        if let (Some(ln), Some(attn)) = (&mut self.ln_mem, &mut self.cross_mem) {
            ln.visit_mut(&format!("{prefix}.ln_mem"), f);
            attn.visit_mut(&format!("{prefix}.cross_mem"), f);
        }
        self.ln_ff.visit_mut(&format!("{prefix}.ln_ff"), f);
        self.ff.visit_mut(&format!("{prefix}.ff"), f);
    }
}

// ── Tape-bound mirrors ──

#[derive(Clone, Copy)]
pub struct VarLn {
    pub gain: Var,
    pub bias: Var,
}

#[derive(Clone, Copy)]
pub struct VarAttn {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

#[derive(Clone, Copy)]
pub struct VarFf {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone)]
pub struct VarEncLayer {
    pub ln1: VarLn,
    pub attn: VarAttn,
    pub ln2: VarLn,
    pub ff: VarFf,
}

#[derive(Clone)]
pub struct VarDecLayer {
    pub ln_self: VarLn,
    pub self_attn: VarAttn,
    pub ln_src: VarLn,
    pub cross_src: VarAttn,
    pub ln_mem: Option<VarLn>,
    pub cross_mem: Option<VarAttn>,
    pub ln_ff: VarLn,
    pub ff: VarFf,
}

pub fn bind_ln(t: &mut Tape, p: &LnParams) -> VarLn {
    VarLn { gain: t.param(&p.gain), bias: t.param(&p.bias) }
}

pub fn bind_attn(t: &mut Tape, p: &AttnParams) -> VarAttn {
    VarAttn {
        wq: t.param(&p.wq),
        bq: t.param(&p.bq),
        wk: t.param(&p.wk),
        bk: t.param(&p.bk),
        wv: t.param(&p.wv),
        bv: t.param(&p.bv),
        wo: t.param(&p.wo),
        bo: t.param(&p.bo),
    }
}

pub fn bind_ff(t: &mut Tape, p: &FfParams) -> VarFf {
    VarFf { w1: t.param(&p.w1), b1: t.param(&p.b1), w2: t.param(&p.w2), b2: t.param(&p.b2) }
}

pub fn bind_enc_layer(t: &mut Tape, p: &EncLayerParams) -> VarEncLayer {
    VarEncLayer {
        ln1: bind_ln(t, &p.ln1),
        attn: bind_attn(t, &p.attn),
        ln2: bind_ln(t, &p.ln2),
        ff: bind_ff(t, &p.ff),
    }
}

pub fn bind_dec_layer(t: &mut Tape, p: &DecLayerParams) -> VarDecLayer {
    VarDecLayer {
        ln_self: bind_ln(t, &p.ln_self),
        self_attn: bind_attn(t, &p.self_attn),
        ln_src: bind_ln(t, &p.ln_src),
        cross_src: bind_attn(t, &p.cross_src),
        ln_mem: p.ln_mem.as_ref().map(|ln| bind_ln(t, ln)),
        cross_mem: p.cross_mem.as_ref().map(|attn| bind_attn(t, attn)),
        ln_ff: bind_ln(t, &p.ln_ff),
        ff: bind_ff(t, &p.ff),
    }
}

impl VarLn {
    pub fn visit_vars(&self, f: &mut dyn FnMut(Var)) {
        f(self.gain);
        f(self.bias);
    }
}

impl VarAttn {
    pub fn visit_vars(&self, f: &mut dyn FnMut(Var)) {
        for v in [self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo] {
            f(v);
        }
    }
}

impl VarFf {
    pub fn visit_vars(&self, f: &mut dyn FnMut(Var)) {
        for v in [self.w1, self.b1, self.w2, self.b2] {
            f(v);
        }
    }
}

impl VarEncLayer {
    pub fn visit_vars(&self, f: &mut dyn FnMut(Var)) {
        self.ln1.visit_vars(f);
        self.attn.visit_vars(f);
        self.ln2.visit_vars(f);
        self.ff.visit_vars(f);
    }
}

impl VarDecLayer {
    pub fn visit_vars(&self, f: &mut dyn FnMut(Var)) {
        self.ln_self.visit_vars(f);
        self.self_attn.visit_vars(f);
        self.ln_src.visit_vars(f);
        self.cross_src.visit_vars(f);
        if let (Some(ln), Some(attn)) = (&self.ln_mem, &self.cross_mem) {
            ln.visit_vars(f);
            attn.visit_vars(f);
        }
        self.ln_ff.visit_vars(f);
        self.ff.visit_vars(f);
    }
}

// ── Forward-pass helpers ──

/// Per-pass context: head count and (in training) a dropout source.
pub struct ForwardCtx<'r> {
    pub heads: usize,
    pub dropout: f64,
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> ForwardCtx<'r> {
    pub fn eval(heads: usize) -> Self {
        ForwardCtx { heads, dropout: 0.0, rng: None }
    }

    pub fn train(heads: usize, dropout: f64, rng: &'r mut ChaCha8Rng) -> Self {
        ForwardCtx { heads, dropout, rng: Some(rng) }
    }

    /// Apply inverted dropout; identity in eval mode or at rate 0.
    pub fn dropout(&mut self, t: &mut Tape, x: Var) -> Var {
        let Some(rng) = self.rng.as_deref_mut() else {
            return x;
        };
        if self.dropout <= 0.0 {
            return x;
        }
        let (m, n) = t.shape(x);
        let keep = 1.0 - self.dropout;
        let mask: Vec<f64> =
            (0..m * n).map(|_| if rng.gen_bool(self.dropout) { 0.0 } else { 1.0 / keep }).collect();
        t.mul_const(x, mask)
    }
}

pub fn layer_norm(t: &mut Tape, x: Var, p: &VarLn) -> Var {
    t.layer_norm(x, p.gain, p.bias)
}

/// Multi-head attention: queries from `q_in`, keys/values from `kv_in`.
/// With `causal`, position i may only attend to kv positions ≤ i (valid when
/// `q_in` and `kv_in` cover the same sequence).
pub fn attention(t: &mut Tape, q_in: Var, kv_in: Var, p: &VarAttn, heads: usize, causal: bool) -> Var {
    let d = t.shape(q_in).1;
    assert_eq!(d % heads, 0, "model_dim {d} not divisible by heads {heads}");
    let dk = d / heads;
    let q = t.matmul(q_in, p.wq);
    let q = t.add_row(q, p.bq);
    let k = t.matmul(kv_in, p.wk);
    let k = t.add_row(k, p.bk);
    let v = t.matmul(kv_in, p.wv);
    let v = t.add_row(v, p.bv);
    let (tq, _) = t.shape(q);
    let (tk, _) = t.shape(k);
    let mask: Option<Vec<f64>> = causal.then(|| {
        assert_eq!(tq, tk, "causal attention needs square score matrix");
        let mut m = vec![0.0; tq * tk];
        for i in 0..tq {
            for j in i + 1..tk {
                m[i * tk + j] = NEG_INF;
            }
        }
        m
    });
    let scale = 1.0 / libm::sqrt(dk as f64);
    let mut heads_out = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = t.slice_cols(q, h * dk, dk);
        let kh = t.slice_cols(k, h * dk, dk);
        let vh = t.slice_cols(v, h * dk, dk);
        let s = t.matmul_t(qh, kh);
        let s = t.scale(s, scale);
        let s = match &mask {
            Some(m) => t.add_const(s, m),
            None => s,
        };
        let a = t.softmax_rows(s);
        heads_out.push(t.matmul(a, vh));
    }
    let o = t.concat_cols(&heads_out);
    let o = t.matmul(o, p.wo);
    t.add_row(o, p.bo)
}

pub fn feed_forward(t: &mut Tape, x: Var, p: &VarFf) -> Var {
    let h = t.matmul(x, p.w1);
    let h = t.add_row(h, p.b1);
    let h = t.relu(h);
    let h = t.matmul(h, p.w2);
    t.add_row(h, p.b2)
}

/// Sinusoidal position table with `max_len` rows.
pub fn positional_table(max_len: usize, d: usize) -> Mat {
    let mut m = Mat::zeros(max_len, d);
    for pos in 0..max_len {
        for i in 0..d / 2 {
            let angle = pos as f64 / libm::pow(10000.0, 2.0 * i as f64 / d as f64);
            m.data[pos * d + 2 * i] = libm::sin(angle);
            m.data[pos * d + 2 * i + 1] = libm::cos(angle);
        }
    }
    m
}

/// Token embedding · √d plus positional offsets.
pub fn embed_sequence(
    t: &mut Tape,
    ctx: &mut ForwardCtx,
    embed: Var,
    ids: &[u32],
    positions: &Mat,
) -> Var {
    let d = t.shape(embed).1;
    assert!(ids.len() <= positions.rows, "sequence longer than position table");
    let e = t.gather(embed, ids);
    let e = t.scale(e, libm::sqrt(d as f64));
    let pos = &positions.data[..ids.len() * d];
    let e = t.add_const(e, pos);
    ctx.dropout(t, e)
}

/// Pre-norm encoder stack ending in a final layer norm.
pub fn encoder_stack(
    t: &mut Tape,
    ctx: &mut ForwardCtx,
    mut x: Var,
    layers: &[VarEncLayer],
    ln_f: &VarLn,
) -> Var {
    for layer in layers {
        let h = layer_norm(t, x, &layer.ln1);
        let h = attention(t, h, h, &layer.attn, ctx.heads, false);
        let h = ctx.dropout(t, h);
        x = t.add(x, h);
        let h = layer_norm(t, x, &layer.ln2);
        let h = feed_forward(t, h, &layer.ff);
        let h = ctx.dropout(t, h);
        x = t.add(x, h);
    }
    layer_norm(t, x, ln_f)
}

/// Pre-norm decoder stack: causal self-attention, cross-attention over
/// source states, optionally cross-attention over memory states, then the
/// feed-forward block; final layer norm after the stack.
pub fn decoder_stack(
    t: &mut Tape,
    ctx: &mut ForwardCtx,
    mut x: Var,
    layers: &[VarDecLayer],
    ln_f: &VarLn,
    src_states: Var,
    mem_states: Option<Var>,
) -> Var {
    for layer in layers {
        let h = layer_norm(t, x, &layer.ln_self);
        let h = attention(t, h, h, &layer.self_attn, ctx.heads, true);
        let h = ctx.dropout(t, h);
        x = t.add(x, h);

        let h = layer_norm(t, x, &layer.ln_src);
        let h = attention(t, h, src_states, &layer.cross_src, ctx.heads, false);
        let h = ctx.dropout(t, h);
        x = t.add(x, h);

        if let (Some(ln), Some(attn), Some(mem)) = (&layer.ln_mem, &layer.cross_mem, mem_states) {
            let h = layer_norm(t, x, ln);
            let h = attention(t, h, mem, attn, ctx.heads, false);
            let h = ctx.dropout(t, h);
            x = t.add(x, h);
        }

        let h = layer_norm(t, x, &layer.ln_ff);
        let h = feed_forward(t, h, &layer.ff);
        let h = ctx.dropout(t, h);
        x = t.add(x, h);
    }
    layer_norm(t, x, ln_f)
}

// ── Optimizer ──

/// Adam with fixed learning rate and global-norm gradient clipping.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, clip: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// One update from gradients listed in the collection's visit order.
    pub fn step<P: ParamCollection>(&mut self, params: &mut P, grads: &[Vec<f64>]) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        assert_eq!(self.m.len(), grads.len(), "gradient count changed mid-training");

        let mut sq = 0.0;
        for g in grads {
            for x in g {
                sq += x * x;
            }
        }
        let norm = libm::sqrt(sq);
        let scale = if self.clip > 0.0 && norm > self.clip { self.clip / norm } else { 1.0 };

        self.step += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.step as f64);

        let mut i = 0;
        params.visit_mut(&mut |_, mat| {
            let g = &grads[i];
            assert_eq!(g.len(), mat.data.len(), "gradient shape mismatch at tensor {i}");
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..g.len() {
                let gj = g[j] * scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                mat.data[j] -= self.lr * mhat / (libm::sqrt(vhat) + self.eps);
            }
            i += 1;
        });
        assert_eq!(i, grads.len(), "visited tensor count changed mid-training");
    }
}

/// Round every parameter through f32, so that in-memory values match what a
/// checkpoint file (which stores f32 blocks) will reproduce on reload.
pub fn quantize_params<P: ParamCollection>(params: &mut P) {
    params.visit_mut(&mut |_, mat| {
        for x in mat.data.iter_mut() {
            *x = *x as f32 as f64;
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    struct ToyParams {
        a: Mat,
        b: Mat,
    }

    impl ParamCollection for ToyParams {
        fn visit(&self, f: &mut dyn FnMut(&str, &Mat)) {
            f("a", &self.a);
            f("b", &self.b);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Mat)) {
            f("a", &mut self.a);
            f("b", &mut self.b);
        }
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // Minimize |x - 3|^2 elementwise.
        let mut p = ToyParams { a: Mat::zeros(1, 4), b: Mat::zeros(1, 2) };
        let mut opt = Adam::new(0.1, 0.0);
        for _ in 0..200 {
            let ga: Vec<f64> = p.a.data.iter().map(|x| 2.0 * (x - 3.0)).collect();
            let gb: Vec<f64> = p.b.data.iter().map(|x| 2.0 * (x - 3.0)).collect();
            opt.step(&mut p, &[ga, gb]);
        }
        for x in p.a.data.iter().chain(&p.b.data) {
            assert!((x - 3.0).abs() < 1e-2, "got {x}");
        }
    }

    #[test]
    fn clipping_bounds_the_update_direction() {
        let mut with_clip = ToyParams { a: Mat::zeros(1, 2), b: Mat::zeros(1, 1) };
        let mut opt = Adam::new(0.1, 1.0);
        let huge = vec![vec![1e6, -1e6], vec![1e6]];
        opt.step(&mut with_clip, &huge);
        // After clipping the global norm to 1, Adam still takes a bounded
        // step; values must stay tiny rather than exploding.
        for x in with_clip.a.data.iter().chain(&with_clip.b.data) {
            assert!(x.abs() <= 0.100001, "got {x}");
        }
    }

    #[test]
    fn positional_rows_are_bounded_and_distinct() {
        let p = positional_table(16, 8);
        assert!(p.data.iter().all(|v| v.abs() <= 1.0));
        for r in 1..16 {
            assert_ne!(p.row(0), p.row(r));
        }
        // First column follows sin(pos).
        for pos in 0..16 {
            assert!((p.at(pos, 0) - libm::sin(pos as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn quantize_is_idempotent() {
        let mut p = ToyParams {
            a: Mat::from_vec(1, 3, vec![0.1234567890123, -1.9876543210987, 42.0]),
            b: Mat::zeros(1, 1),
        };
        quantize_params(&mut p);
        let once = p.a.data.clone();
        quantize_params(&mut p);
        assert_eq!(once, p.a.data);
        for x in &p.a.data {
            assert_eq!(*x, *x as f32 as f64);
        }
    }

    #[test]
    fn encoder_stack_is_deterministic_in_eval() {
        let mut r = rng::stream(3, "test-init");
        let d = 8;
        let embed = uniform(&mut r, 10, d, 0.05);
        let layer = EncLayerParams::init(&mut r, d, 16);
        let ln_f = LnParams::init(d);
        let pos = positional_table(12, d);
        let run = || {
            let mut t = Tape::new();
            let mut ctx = ForwardCtx::eval(2);
            let e = t.param(&embed);
            let l = bind_enc_layer(&mut t, &layer);
            let f = bind_ln(&mut t, &ln_f);
            let x = embed_sequence(&mut t, &mut ctx, e, &[1, 5, 2, 7], &pos);
            let out = encoder_stack(&mut t, &mut ctx, x, &[l], &f);
            t.value(out).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn dropout_masks_differ_between_calls_but_not_runs() {
        let mut t = Tape::new();
        let x = t.constant(1, 64, vec![1.0; 64]);
        let mut r1 = rng::stream(9, "drop");
        let mut ctx = ForwardCtx::train(2, 0.5, &mut r1);
        let a = ctx.dropout(&mut t, x);
        let b = ctx.dropout(&mut t, x);
        assert_ne!(t.value(a), t.value(b));

        let mut t2 = Tape::new();
        let x2 = t2.constant(1, 64, vec![1.0; 64]);
        let mut r2 = rng::stream(9, "drop");
        let mut ctx2 = ForwardCtx::train(2, 0.5, &mut r2);
        let a2 = ctx2.dropout(&mut t2, x2);
        assert_eq!(t.value(a), t2.value(a2));
    }

    #[test]
    fn causal_attention_ignores_the_future() {
        // Feed two inputs that differ only in the last position; the first
        // row of causal attention output must not change.
        let mut r = rng::stream(4, "test-attn");
        let p = AttnParams::init(&mut r, 8);
        let run = |last: f64| {
            let mut t = Tape::new();
            let a = bind_attn(&mut t, &p);
            let mut data = vec![0.1; 3 * 8];
            for c in 0..8 {
                data[2 * 8 + c] = last;
            }
            let x = t.constant(3, 8, data);
            let out = attention(&mut t, x, x, &a, 2, true);
            t.value(out)[..8].to_vec()
        };
        assert_eq!(run(0.5), run(-2.0));
    }

    #[test]
    fn tensor_specs_fix_the_serialization_order() {
        let mut r = rng::stream(5, "test-spec");
        let layer = DecLayerParams::init(&mut r, 8, 16, true);
        struct One(DecLayerParams);
        impl ParamCollection for One {
            fn visit(&self, f: &mut dyn FnMut(&str, &Mat)) {
                self.0.visit("dec.0", f);
            }
            fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Mat)) {
                self.0.visit_mut("dec.0", f);
            }
        }
        let one = One(layer);
        let specs = one.tensor_specs();
        // dual decoder layer: 4 layer norms + 3 attention blocks + ff
        assert_eq!(specs.len(), 4 * 2 + 3 * 8 + 4);
        assert_eq!(specs[0].0, "dec.0.ln_self.gain");
        assert!(specs.iter().any(|(n, _, _)| n == "dec.0.cross_mem.wo"));
        // visit and visit_mut agree on order
        let mut names = Vec::new();
        let mut one = one;
        one.visit_mut(&mut |n, _| names.push(String::from(n)));
        assert_eq!(names, specs.iter().map(|(n, _, _)| n.clone()).collect::<Vec<_>>());
    }
}
