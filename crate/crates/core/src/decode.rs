//! Beam search over any step scorer.
//!
//! The scorer abstracts one autoregressive step: feed a token, get back
//! log-probabilities for the next position. Beams advance in lockstep; a
//! beam that emits EOS retires into the finished set, and search stops once
//! `width` hypotheses have finished, every live beam has retired, or the
//! length cap forces the remaining live beams out unfinished (flagged).
//!
//! Selection at each step takes the `width` best continuations over all live
//! beams by total log-probability, with ties broken by parent beam order and
//! then token id, so decoding is fully deterministic.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// One autoregressive decoding step.
pub trait StepScorer {
    type State: Clone;

    /// State before any token has been fed.
    fn initial_state(&self) -> Self::State;

    /// Consume `token`, returning log-probabilities over the next token.
    fn step(&self, state: &mut Self::State, token: u32) -> Vec<f64>;

    fn vocab_size(&self) -> usize;
}

/// A decoded sequence. `tokens` excludes BOS and ends with EOS when
/// `finished`; an unfinished hypothesis was cut off at the length cap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub total_logprob: f64,
    pub per_token_logprobs: Vec<f64>,
    pub finished: bool,
}

impl Hypothesis {
    /// Length-normalized score: total log-probability over |tokens|^alpha.
    pub fn normalized_score(&self, alpha: f64) -> f64 {
        let len = self.tokens.len().max(1) as f64;
        self.total_logprob / libm::pow(len, alpha)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BeamParams {
    pub width: usize,
    pub max_len: usize,
    /// Length-normalization exponent used for hypothesis selection.
    pub alpha: f64,
    pub bos: u32,
    pub eos: u32,
}

struct Beam<S> {
    state: S,
    tokens: Vec<u32>,
    logprobs: Vec<f64>,
    total: f64,
    /// Distribution over the next token, produced by the last step.
    next_lp: Vec<f64>,
}

/// Run beam search and return every collected hypothesis, deduplicated and
/// sorted by total log-probability descending (ties by tokens ascending).
pub fn beam_search<S: StepScorer>(scorer: &S, params: &BeamParams) -> Vec<Hypothesis> {
    assert!(params.width >= 1, "beam width must be at least 1");
    assert!(params.max_len >= 1, "max_len must allow at least one token");
    let vocab = scorer.vocab_size();

    let mut state = scorer.initial_state();
    let first = scorer.step(&mut state, params.bos);
    debug_assert_eq!(first.len(), vocab);
    let mut live = Vec::with_capacity(params.width);
    live.push(Beam { state, tokens: Vec::new(), logprobs: Vec::new(), total: 0.0, next_lp: first });
    let mut finished: Vec<Hypothesis> = Vec::new();

    while !live.is_empty() && finished.len() < params.width {
        if live[0].tokens.len() >= params.max_len {
            for beam in live.drain(..) {
                finished.push(Hypothesis {
                    tokens: beam.tokens,
                    total_logprob: beam.total,
                    per_token_logprobs: beam.logprobs,
                    finished: false,
                });
            }
            break;
        }

        // All continuations of all live beams, best first.
        let mut expansions: Vec<(f64, usize, u32)> = Vec::with_capacity(live.len() * vocab);
        for (bi, beam) in live.iter().enumerate() {
            for tok in 0..vocab as u32 {
                expansions.push((beam.total + beam.next_lp[tok as usize], bi, tok));
            }
        }
        expansions.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(core::cmp::Ordering::Equal)
                .then_with(|| a.1.cmp(&b.1))
                .then_with(|| a.2.cmp(&b.2))
        });
        expansions.truncate(params.width);

        let mut next_live = Vec::with_capacity(params.width);
        for (total, bi, tok) in expansions {
            let parent = &live[bi];
            let lp = parent.next_lp[tok as usize];
            let mut tokens = parent.tokens.clone();
            tokens.push(tok);
            let mut logprobs = parent.logprobs.clone();
            logprobs.push(lp);
            if tok == params.eos {
                finished.push(Hypothesis {
                    tokens,
                    total_logprob: total,
                    per_token_logprobs: logprobs,
                    finished: true,
                });
            } else {
                let mut state = parent.state.clone();
                let next_lp = scorer.step(&mut state, tok);
                next_live.push(Beam { state, tokens, logprobs, total, next_lp });
            }
        }
        live = next_live;
    }

    let mut seen: BTreeSet<Vec<u32>> = BTreeSet::new();
    finished.retain(|h| seen.insert(h.tokens.clone()));
    finished.sort_by(|a, b| {
        b.total_logprob
            .partial_cmp(&a.total_logprob)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    finished
}

/// The single best hypothesis under length normalization, preferring
/// finished hypotheses over forced-unfinished ones.
pub fn best_hypothesis(mut candidates: Vec<Hypothesis>, alpha: f64) -> Option<Hypothesis> {
    if candidates.is_empty() {
        return None;
    }
    candidates.sort_by(|a, b| {
        b.finished
            .cmp(&a.finished)
            .then_with(|| {
                b.normalized_score(alpha)
                    .partial_cmp(&a.normalized_score(alpha))
                    .unwrap_or(core::cmp::Ordering::Equal)
            })
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    Some(candidates.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    /// Order-1 Markov toy scorer: log-probabilities depend only on the last
    /// token. Vocab: 0=BOS, 1=EOS, 2=a, 3=b.
    struct Toy {
        /// rows: conditioning token, cols: next-token probability.
        table: Vec<Vec<f64>>,
    }

    impl Toy {
        fn new() -> Self {
            let rows = vec![
                vec![0.0, 0.1, 0.6, 0.3], // after BOS
                vec![0.0, 1.0, 0.0, 0.0], // after EOS (absorbing, unused)
                vec![0.0, 0.2, 0.1, 0.7], // after a
                vec![0.0, 0.8, 0.1, 0.1], // after b
            ];
            Toy { table: rows }
        }

        fn logprobs(&self, last: u32) -> Vec<f64> {
            self.table[last as usize]
                .iter()
                .map(|&p| if p > 0.0 { libm::log(p) } else { -1e30 })
                .collect()
        }
    }

    impl StepScorer for Toy {
        type State = u32;
        fn initial_state(&self) -> u32 {
            0
        }
        fn step(&self, state: &mut u32, token: u32) -> Vec<f64> {
            *state = token;
            self.logprobs(token)
        }
        fn vocab_size(&self) -> usize {
            4
        }
    }

    const PARAMS: BeamParams = BeamParams { width: 2, max_len: 5, alpha: 0.6, bos: 0, eos: 1 };

    /// Every sequence over {a,b} of length < max_len terminated by EOS, plus
    /// unterminated max-length sequences, scored by the same tables.
    fn enumerate_all(toy: &Toy, max_len: usize) -> Vec<Hypothesis> {
        let mut out = Vec::new();
        let mut stack = vec![(vec![0u32], 0.0f64, vec![])]; // (path incl BOS, total, lps)
        while let Some((path, total, lps)) = stack.pop() {
            let last = *path.last().unwrap();
            let lp = toy.logprobs(last);
            let gen_len = path.len() - 1;
            for tok in [1u32, 2, 3] {
                let t2 = total + lp[tok as usize];
                let mut tokens: Vec<u32> = path[1..].to_vec();
                tokens.push(tok);
                let mut lps2 = lps.clone();
                lps2.push(lp[tok as usize]);
                if tok == 1 {
                    out.push(Hypothesis {
                        tokens,
                        total_logprob: t2,
                        per_token_logprobs: lps2,
                        finished: true,
                    });
                } else if gen_len + 1 >= max_len {
                    out.push(Hypothesis {
                        tokens,
                        total_logprob: t2,
                        per_token_logprobs: lps2,
                        finished: false,
                    });
                } else {
                    let mut p2 = path.clone();
                    p2.push(tok);
                    stack.push((p2, t2, lps2));
                }
            }
        }
        out
    }

    #[test]
    fn beam_two_matches_exhaustive_enumeration() {
        let toy = Toy::new();
        let beams = beam_search(&toy, &PARAMS);
        let all = enumerate_all(&toy, PARAMS.max_len);
        let best_beam = best_hypothesis(beams, PARAMS.alpha).unwrap();
        let best_all = best_hypothesis(all, PARAMS.alpha).unwrap();
        assert_eq!(best_beam.tokens, best_all.tokens);
        assert!((best_beam.total_logprob - best_all.total_logprob).abs() < 1e-12);
        // The hand-designed table makes "a b EOS" optimal.
        assert_eq!(best_beam.tokens, vec![2, 3, 1]);
    }

    #[test]
    fn beam_one_equals_greedy() {
        let toy = Toy::new();
        let params = BeamParams { width: 1, ..PARAMS };
        let beams = beam_search(&toy, &params);
        assert_eq!(beams.len(), 1);

        // Greedy argmax by hand.
        let mut state = toy.initial_state();
        let mut tok = 0u32;
        let mut greedy = Vec::new();
        for _ in 0..params.max_len {
            let lp = toy.step(&mut state, tok);
            let arg = lp
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i as u32)
                .unwrap();
            greedy.push(arg);
            tok = arg;
            if arg == params.eos {
                break;
            }
        }
        assert_eq!(beams[0].tokens, greedy);
    }

    #[test]
    fn pool_is_sorted_and_deduplicated() {
        let toy = Toy::new();
        let params = BeamParams { width: 4, ..PARAMS };
        let beams = beam_search(&toy, &params);
        assert!(!beams.is_empty());
        let mut seen = BTreeSet::new();
        for h in &beams {
            assert!(seen.insert(h.tokens.clone()), "duplicate {:?}", h.tokens);
        }
        for w in beams.windows(2) {
            assert!(w[0].total_logprob >= w[1].total_logprob);
        }
    }

    #[test]
    fn totals_equal_per_token_sums() {
        let toy = Toy::new();
        let beams = beam_search(&toy, &BeamParams { width: 4, ..PARAMS });
        for h in &beams {
            let sum: f64 = h.per_token_logprobs.iter().sum();
            assert!((h.total_logprob - sum).abs() < 1e-12);
            assert_eq!(h.tokens.len(), h.per_token_logprobs.len());
        }
    }

    #[test]
    fn finished_hypotheses_end_with_eos() {
        let toy = Toy::new();
        let beams = beam_search(&toy, &BeamParams { width: 4, ..PARAMS });
        for h in &beams {
            if h.finished {
                assert_eq!(*h.tokens.last().unwrap(), PARAMS.eos);
            } else {
                assert_eq!(h.tokens.len(), PARAMS.max_len);
            }
        }
    }

    #[test]
    fn length_cap_flags_unfinished() {
        // A scorer that never emits EOS with any mass.
        struct NoEos;
        impl StepScorer for NoEos {
            type State = ();
            fn initial_state(&self) {}
            fn step(&self, _: &mut (), _: u32) -> Vec<f64> {
                // All mass on token 2.
                vec![-1e30, -1e30, 0.0, -1e30]
            }
            fn vocab_size(&self) -> usize {
                4
            }
        }
        let beams = beam_search(&NoEos, &BeamParams { width: 2, max_len: 3, alpha: 0.6, bos: 0, eos: 1 });
        assert!(!beams.is_empty());
        assert!(beams.iter().all(|h| !h.finished));
        assert!(beams.iter().all(|h| h.tokens.len() == 3));
        let best = best_hypothesis(beams, 0.6).unwrap();
        assert!(!best.finished);
    }
}
