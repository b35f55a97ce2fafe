//! Parallel corpora: text pairs, vocabulary, and a synthetic task generator.
//!
//! The synthetic task produces source/target pairs from a fixed set of
//! templates. A template is a scaffold of fixed tokens with slots in between;
//! the target side reuses the slot fillers after mapping them through a
//! bilingual lexicon and permuting their order with a template-specific
//! permutation. The bilingual mapping is a template-specific random bijection,
//! so the target-side form of a (filler, template) combination never seen in
//! train is unpredictable from the source alone. Each slot has a
//! template-favorite filler used with fixed probability; other train draws
//! come from a rare band of the lexicon outside every template's favorites.
//! Valid and test pairs additionally draw novel combinations: fillers that are
//! frequent in train under other templates but never paired with this one, so
//! their target-side forms are only reachable by copying them out of a
//! well-aligned memory. That is what makes memory quality matter.
//!
//! Tokenization is whitespace-level throughout. Token frequency counts are
//! taken over the train split only and ride along in [`Vocabulary`] so that
//! downstream reports can bucket scores by how often a token was seen in
//! training.

use alloc::borrow::ToOwned;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::rng;

/// Reserved special token ids. Regular tokens start at [`FIRST_REGULAR_ID`].
pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const UNK_ID: u32 = 4;
pub const FIRST_REGULAR_ID: u32 = 5;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const SEP_TOKEN: &str = "<sep>";
pub const UNK_TOKEN: &str = "<unk>";

/// One parallel example: a source token sequence and its target.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPair {
    pub id: String,
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub template_id: Option<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// A split of the corpus together with the shared vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Datastore {
    pub pairs: Vec<TextPair>,
    pub split: Split,
    pub vocabulary: Vocabulary,
}

impl Datastore {
    /// Wrap pairs in a datastore, checking the id-uniqueness and
    /// non-emptiness invariants.
    pub fn new(pairs: Vec<TextPair>, split: Split, vocabulary: Vocabulary) -> Result<Self, CorpusError> {
        let mut seen = BTreeSet::new();
        for p in &pairs {
            if p.source.is_empty() || p.target.is_empty() {
                return Err(CorpusError::EmptyPair { id: p.id.clone() });
            }
            if !seen.insert(p.id.clone()) {
                return Err(CorpusError::DuplicateId { id: p.id.clone() });
            }
        }
        Ok(Datastore { pairs, split, vocabulary })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&TextPair> {
        self.pairs.iter().find(|p| p.id == id)
    }
}

/// Token/id bijection plus train-split frequency counts.
///
/// Ids are dense: specials occupy `0..FIRST_REGULAR_ID`, regular tokens
/// follow in lexicographic order. Encoding maps unknown tokens to UNK.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    ids: BTreeMap<String, u32>,
    freqs: Vec<u64>,
}

impl Vocabulary {
    /// Build from train pairs: every source and target token is covered and
    /// counted (total occurrences across both sides).
    pub fn build(train_pairs: &[TextPair]) -> Self {
        let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
        for p in train_pairs {
            for t in p.source.iter().chain(p.target.iter()) {
                *counts.entry(t.as_str()).or_insert(0) += 1;
            }
        }
        let mut tokens: Vec<String> = vec![
            PAD_TOKEN.to_owned(),
            BOS_TOKEN.to_owned(),
            EOS_TOKEN.to_owned(),
            SEP_TOKEN.to_owned(),
            UNK_TOKEN.to_owned(),
        ];
        let mut freqs: Vec<u64> = vec![0; tokens.len()];
        for (tok, n) in &counts {
            tokens.push((*tok).to_owned());
            freqs.push(*n);
        }
        Self::from_parts(tokens, freqs)
    }

    /// Reassemble from the serialized form (token list + counts).
    pub fn from_parts(tokens: Vec<String>, freqs: Vec<u64>) -> Self {
        assert_eq!(tokens.len(), freqs.len(), "token and frequency lists disagree");
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, ids, freqs }
    }

    /// Restore the lookup map after deserialization.
    pub fn rebuild_lookup(&mut self) {
        self.ids = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn freq(&self, id: u32) -> u64 {
        self.freqs[id as usize]
    }

    pub fn freq_of(&self, token: &str) -> u64 {
        self.ids.get(token).map(|&i| self.freqs[i as usize]).unwrap_or(0)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn freqs(&self) -> &[u64] {
        &self.freqs
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i as usize].clone()).collect()
    }
}

/// Whitespace tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_owned()).collect()
}

/// Inverse of [`tokenize`] for single-space-separated text.
pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

/// Parameters of the synthetic task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub template_count: usize,
    pub lexicon_size: usize,
    /// (train, valid, test) sizes.
    pub pairs_per_split: (usize, usize, usize),
    /// Inclusive (min, max) slots per template.
    pub slot_count_range: (usize, usize),
    /// Probability that a target token is replaced by a random lexicon form.
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            template_count: 16,
            lexicon_size: 200,
            pairs_per_split: (2000, 200, 200),
            slot_count_range: (3, 6),
            noise_rate: 0.02,
            seed: 17,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.template_count < 2 {
            return Err(CorpusError::InvalidSpec("template_count must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(CorpusError::InvalidSpec("noise_rate must lie in [0, 1]"));
        }
        let (tr, va, te) = self.pairs_per_split;
        if tr < 1 || va < 1 || te < 1 {
            return Err(CorpusError::InvalidSpec("every split needs at least one pair"));
        }
        let (lo, hi) = self.slot_count_range;
        if lo < 1 || lo > hi {
            return Err(CorpusError::InvalidSpec("slot_count_range must satisfy 1 <= min <= max"));
        }
        if self.lexicon_size < hi {
            return Err(CorpusError::InvalidSpec("lexicon smaller than max slot count"));
        }
        Ok(())
    }
}

/// Probability that a slot uses its template's favorite filler instead of a
/// draw from the rare band. Favorites make same-template pairs share filler
/// values, not just scaffolds, so a retrieved neighbor carries usable
/// target-side content.
const FAVORITE_FILLER_RATE: f64 = 0.6;

/// Probability that a non-favorite slot in a valid or test pair draws a novel
/// combination: a word that other templates favor but that never occurs under
/// this template in train. Its target-side form under this template's
/// bijection is therefore unguessable without a memory that contains it.
const NOVEL_COMBINATION_RATE: f64 = 0.5;

struct Template {
    slots: usize,
    /// `slots + 1` fixed source tokens, interleaved with the slots.
    src_scaffold: Vec<String>,
    /// `slots + 1` fixed target tokens.
    tgt_scaffold: Vec<String>,
    /// Where source slot `j` lands on the target side.
    perm: Vec<usize>,
    /// Per-slot favorite filler, as a lexicon index.
    favorites: Vec<usize>,
    /// Template-specific bilingual dictionary: source word `i` maps to target
    /// word `mapping[i]`. A random bijection, so a (word, template) pairing
    /// absent from train carries no signal about its target-side form.
    mapping: Vec<usize>,
    /// Other templates' favorites, excluding this template's own. Train pairs
    /// never draw them for this template, so when valid or test pairs do, the
    /// (word, template) combination is new even though the word itself is
    /// common in train.
    novel_pool: Vec<usize>,
}

/// A fully instantiated synthetic task: templates, lexicons, and the
/// deterministic source-to-target transformation they define.
pub struct SyntheticTask {
    pub spec: SyntheticTaskSpec,
    templates: Vec<Template>,
    lexicon_src: Vec<String>,
    lexicon_tgt: Vec<String>,
    /// Lexicon indices outside every template's favorites: the band that
    /// non-favorite train draws come from.
    rare_pool: Vec<usize>,
}

/// Pseudoword for index `i`: two or more consonant-vowel syllables, distinct
/// for distinct indices.
fn pseudoword(i: usize) -> String {
    const C: [char; 12] = ['b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't'];
    const V: [char; 5] = ['a', 'e', 'i', 'o', 'u'];
    let mut n = i + C.len() * V.len();
    let mut syllables = Vec::new();
    while n > 0 {
        let d = n % (C.len() * V.len());
        syllables.push((C[d / V.len()], V[d % V.len()]));
        n /= C.len() * V.len();
    }
    let mut out = String::new();
    for (c, v) in syllables.into_iter().rev() {
        out.push(c);
        out.push(v);
    }
    out
}

impl SyntheticTask {
    /// Build the task definition (templates, permutations, favorite fillers,
    /// filler distribution) from the spec. Pure function of the spec,
    /// including its seed.
    pub fn from_spec(spec: SyntheticTaskSpec) -> Result<Self, CorpusError> {
        spec.validate()?;
        let (_, max_slots) = spec.slot_count_range;
        let lexicon_src: Vec<String> = (0..spec.lexicon_size).map(pseudoword).collect();
        let lexicon_tgt: Vec<String> = lexicon_src.iter().map(|w| w.to_uppercase()).collect();

        // Scaffold words come from index ranges disjoint from the lexicon.
        let src_base = spec.lexicon_size;
        let tgt_base = src_base + spec.template_count * (max_slots + 1);

        let mut r = rng::stream(spec.seed, "task-definition");
        let mut parts = Vec::with_capacity(spec.template_count);
        for k in 0..spec.template_count {
            let slots = r.gen_range(spec.slot_count_range.0..=spec.slot_count_range.1);
            let src_scaffold: Vec<String> = (0..=slots)
                .map(|j| pseudoword(src_base + k * (max_slots + 1) + j))
                .collect();
            let tgt_scaffold: Vec<String> = (0..=slots)
                .map(|j| pseudoword(tgt_base + k * (max_slots + 1) + j).to_uppercase())
                .collect();
            let mut perm: Vec<usize> = (0..slots).collect();
            // Fisher-Yates using the task stream.
            for i in (1..slots).rev() {
                let j = r.gen_range(0..=i);
                perm.swap(i, j);
            }
            let favorites = sample(&mut r, spec.lexicon_size, slots).into_vec();
            let mut mapping: Vec<usize> = (0..spec.lexicon_size).collect();
            mapping.shuffle(&mut r);
            parts.push((slots, src_scaffold, tgt_scaffold, perm, favorites, mapping));
        }

        let favorite_union: BTreeSet<usize> =
            parts.iter().flat_map(|p| p.4.iter().copied()).collect();
        let templates: Vec<Template> = parts
            .into_iter()
            .map(|(slots, src_scaffold, tgt_scaffold, perm, favorites, mapping)| {
                let novel_pool: Vec<usize> = favorite_union
                    .iter()
                    .copied()
                    .filter(|i| !favorites.contains(i))
                    .collect();
                Template { slots, src_scaffold, tgt_scaffold, perm, favorites, mapping, novel_pool }
            })
            .collect();
        let mut rare_pool: Vec<usize> =
            (0..spec.lexicon_size).filter(|i| !favorite_union.contains(i)).collect();
        if rare_pool.is_empty() {
            // Degenerate specs where favorites cover the whole lexicon.
            rare_pool = (0..spec.lexicon_size).collect();
        }
        Ok(SyntheticTask { spec, templates, lexicon_src, lexicon_tgt, rare_pool })
    }

    pub fn template_count(&self) -> usize {
        self.templates.len()
    }

    /// The noise-free target for a source produced by `template_id`:
    /// map each filler through the lexicon, permute, re-interleave with the
    /// target scaffold.
    pub fn transform(&self, template_id: u32, source: &[String]) -> Vec<String> {
        let t = &self.templates[template_id as usize];
        let fillers: Vec<&String> = (0..t.slots).map(|j| &source[2 * j + 1]).collect();
        let mut out = Vec::with_capacity(2 * t.slots + 1);
        for j in 0..t.slots {
            out.push(t.tgt_scaffold[j].clone());
            let src_word = fillers[t.perm[j]];
            let li = self
                .lexicon_src
                .iter()
                .position(|w| w == src_word)
                .expect("slot filler missing from lexicon");
            out.push(self.lexicon_tgt[t.mapping[li]].clone());
        }
        out.push(t.tgt_scaffold[t.slots].clone());
        out
    }

    fn sample_pair(&self, r: &mut ChaCha8Rng, split: Split, id: String) -> TextPair {
        let k = r.gen_range(0..self.templates.len());
        let t = &self.templates[k];
        let mut source = Vec::with_capacity(2 * t.slots + 1);
        for j in 0..t.slots {
            let filler = if r.gen_bool(FAVORITE_FILLER_RATE) {
                t.favorites[j]
            } else if split != Split::Train
                && !t.novel_pool.is_empty()
                && r.gen_bool(NOVEL_COMBINATION_RATE)
            {
                t.novel_pool[r.gen_range(0..t.novel_pool.len())]
            } else {
                self.rare_pool[r.gen_range(0..self.rare_pool.len())]
            };
            source.push(t.src_scaffold[j].clone());
            source.push(self.lexicon_src[filler].clone());
        }
        source.push(t.src_scaffold[t.slots].clone());

        let mut target = self.transform(k as u32, &source);
        for tok in target.iter_mut() {
            if self.spec.noise_rate > 0.0 && r.gen_bool(self.spec.noise_rate) {
                *tok = self.lexicon_tgt[r.gen_range(0..self.lexicon_tgt.len())].clone();
            }
        }
        TextPair { id, source, target, template_id: Some(k as u32) }
    }

    fn sample_split(&self, split: Split, count: usize) -> Vec<TextPair> {
        let label = format!("pairs-{}", split.as_str());
        let mut r = rng::stream(self.spec.seed, &label);
        (0..count)
            .map(|i| self.sample_pair(&mut r, split, format!("{}-{:04}", split.as_str(), i)))
            .collect()
    }

    /// Generate the three splits. The vocabulary is built from the train
    /// split and shared by all three datastores.
    pub fn generate(&self) -> Result<(Datastore, Datastore, Datastore), CorpusError> {
        let (n_train, n_valid, n_test) = self.spec.pairs_per_split;
        let train_pairs = self.sample_split(Split::Train, n_train);
        let valid_pairs = self.sample_split(Split::Valid, n_valid);
        let test_pairs = self.sample_split(Split::Test, n_test);
        let vocab = Vocabulary::build(&train_pairs);
        Ok((
            Datastore::new(train_pairs, Split::Train, vocab.clone())?,
            Datastore::new(valid_pairs, Split::Valid, vocab.clone())?,
            Datastore::new(test_pairs, Split::Test, vocab)?,
        ))
    }
}

/// Build a synthetic corpus triple directly from a spec.
pub fn generate_synthetic(
    spec: SyntheticTaskSpec,
) -> Result<(Datastore, Datastore, Datastore), CorpusError> {
    SyntheticTask::from_spec(spec)?.generate()
}

/// Build a vocabulary over train pairs.
pub fn build_vocab(train_pairs: &[TextPair]) -> Vocabulary {
    Vocabulary::build(train_pairs)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CorpusError {
    InvalidSpec(&'static str),
    EmptyPair { id: String },
    DuplicateId { id: String },
}

impl fmt::Display for CorpusError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CorpusError::InvalidSpec(msg) => write!(f, "invalid synthetic task spec: {msg}"),
            CorpusError::EmptyPair { id } => write!(f, "pair {id} has an empty source or target"),
            CorpusError::DuplicateId { id } => write!(f, "duplicate pair id {id}"),
        }
    }
}

impl core::error::Error for CorpusError {}
