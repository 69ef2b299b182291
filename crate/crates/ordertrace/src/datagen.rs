//! Alias-entity QA corpus generation.
//!
//! Entities carry six closed-set attributes (gender, birth date, death date,
//! region, occupation, nationality). Each entity is referred to exclusively by
//! a unique random alias built from a dedicated 200-symbol alias alphabet, so
//! alias token length is constant by construction and test prompts are
//! position-aligned. Entities are partitioned into disjoint fine-tuning
//! stages, and each stage is further split entity-wise into probe-train /
//! probe-test subsets.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("alias alphabet exhausted: {alphabet_size}^{token_len} < {requested} aliases")]
    AlphabetExhausted {
        alphabet_size: usize,
        token_len: usize,
        requested: usize,
    },
    #[error("template pool too small: requested {requested} distinct templates, pool has {available}")]
    TemplatePoolTooSmall { requested: usize, available: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus parse error: {0}")]
    Parse(String),
}

/// The six QA attribute kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttrKind {
    Gender,
    BirthDate,
    DeathDate,
    Region,
    Occupation,
    Nationality,
}

pub const ATTR_KINDS: [AttrKind; 6] = [
    AttrKind::Gender,
    AttrKind::BirthDate,
    AttrKind::DeathDate,
    AttrKind::Region,
    AttrKind::Occupation,
    AttrKind::Nationality,
];

/// Closed answer-value surfaces for one attribute kind.
pub fn attr_values(kind: AttrKind) -> Vec<String> {
    match kind {
        AttrKind::Gender => vec!["male".into(), "female".into()],
        // Birth dates are centuries, death dates are decades; both ~30 values.
        AttrKind::BirthDate => (1..=30).map(|i| format!("{i}-century")).collect(),
        AttrKind::DeathDate => (0..30).map(|i| format!("{}s", 1650 + 10 * i)).collect(),
        AttrKind::Region => [
            "Europe",
            "Asia",
            "Africa",
            "Americas",
            "Oceania",
            "Levant",
            "Caribbean",
            "Arctic",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect(),
        AttrKind::Occupation => [
            "actor",
            "writer",
            "politician",
            "scientist",
            "painter",
            "musician",
            "soldier",
            "explorer",
            "priest",
            "merchant",
            "athlete",
            "inventor",
            "philosopher",
            "architect",
            "physician",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect(),
        AttrKind::Nationality => [
            "France", "England", "Spain", "Portugal", "Italy", "Germany", "Russia", "China",
            "Japan", "India", "Persia", "Egypt", "Greece", "Turkey", "Poland", "Sweden", "Norway",
            "Denmark", "Holland", "Austria", "Hungary", "Scotland", "Ireland", "Mexico", "Brazil",
            "Peru", "Canada", "America", "Korea", "Morocco",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect(),
    }
}

/// One named entity with all six attributes populated.
///
/// `attrs[k]` indexes into `attr_values(ATTR_KINDS[k])`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub entity_id: u32,
    pub attrs: [u16; 6],
}

impl EntityRecord {
    pub fn attr_value(&self, kind: AttrKind) -> String {
        let k = ATTR_KINDS.iter().position(|&x| x == kind).unwrap();
        attr_values(kind)[self.attrs[k] as usize].clone()
    }
}

/// A unique fixed-length alias over the alias alphabet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alias {
    pub entity_id: u32,
    /// Indices into the alias alphabet (NOT vocabulary token ids).
    pub subtokens: Vec<u16>,
    pub surface: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeSplit {
    ProbeTrain,
    ProbeTest,
}

/// Disjoint partition of entities into fine-tuning stages plus per-entity
/// probe-split labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StagePlan {
    pub m: usize,
    /// Stage index in 1..=m, by entity position.
    pub stage_of: Vec<u16>,
    /// Per-stage epoch counts (training schedule default; may be overridden).
    pub epochs: Vec<u32>,
    pub samples_per_entity: usize,
    /// Filled in by [`split_probe`]; defaults to all probe-train.
    pub probe_split: Vec<ProbeSplit>,
}

impl StagePlan {
    /// Entity indices belonging to stage `s` (1-based).
    pub fn stage_entities(&self, s: u16) -> Vec<usize> {
        self.stage_of
            .iter()
            .enumerate()
            .filter(|(_, &st)| st == s)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Synthetic,
    Natural,
}

impl Variant {
    pub fn alias_len(self) -> usize {
        match self {
            Variant::Synthetic => 3,
            Variant::Natural => 5,
        }
    }
}

/// One tokenized QA sample (training) or answerless test prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QASample {
    pub entity_id: u32,
    pub stage: u16,
    pub probe_split: ProbeSplit,
    pub template_id: u32,
    pub prompt_tokens: Vec<u32>,
    pub answer_tokens: Vec<u32>,
    pub variant: Variant,
    pub text: String,
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

pub const ALIAS_ALPHABET_SIZE: usize = 200;
/// Stage letters available for the explicit stage-reporting task.
pub const STAGE_LETTERS: [&str; 10] = ["A", "B", "C", "D", "E", "F", "G", "H", "I", "J"];

/// Closed word-level vocabulary with reserved ranges.
///
/// Layout: structural tokens, then template words, then answer tokens, then
/// the alias alphabet as the final contiguous range. The vocabulary is a pure
/// function of the static template/answer data, so every corpus (either
/// variant) shares the same token ids.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    pub tokens: Vec<String>,
    pub ids: HashMap<String, u32>,
    pub alias_range: (u32, u32),
    pub answer_range: (u32, u32),
    pub pad_id: u32,
    pub newline_id: u32,
    pub answer_marker_id: u32,
}

impl Vocabulary {
    pub fn build() -> Vocabulary {
        let mut tokens: Vec<String> = Vec::new();
        let mut seen: HashSet<String> = HashSet::new();
        let push = |tokens: &mut Vec<String>, seen: &mut HashSet<String>, t: &str| {
            if seen.insert(t.to_string()) {
                tokens.push(t.to_string());
            }
        };

        // Structural tokens first.
        for t in ["<pad>", "\n", "Q:", "A:", "<|", "|>", "?", ".", ","] {
            push(&mut tokens, &mut seen, t);
        }
        // Template words from every template family, in definition order.
        let mut words: Vec<String> = Vec::new();
        for kind in ATTR_KINDS {
            for w in synthetic_template_words(kind) {
                words.push(w);
            }
        }
        for p in test_prompt_patterns() {
            words.extend(p.iter().map(|s| s.to_string()));
        }
        words.extend(stage_report_pattern().iter().map(|s| s.to_string()));
        for t in natural_templates() {
            words.extend(t.pattern.iter().cloned());
        }
        for nw in NOUN_WORDS {
            words.extend(nw.split(' ').map(|s| s.to_string()));
        }
        for ap in ALIAS_PHRASES {
            words.extend(ap.split(' ').map(|s| s.to_string()));
        }
        for w in &words {
            if w != "ENTITY" && w != "ANSWER" {
                push(&mut tokens, &mut seen, w);
            }
        }

        // Answer tokens.
        let answer_start = tokens.len() as u32;
        for kind in ATTR_KINDS {
            for v in attr_values(kind) {
                push(&mut tokens, &mut seen, &v);
            }
        }
        for l in STAGE_LETTERS {
            push(&mut tokens, &mut seen, l);
        }
        let answer_end = tokens.len() as u32;

        // Alias alphabet: its own reserved range, disjoint from everything.
        let alias_start = tokens.len() as u32;
        for i in 0..ALIAS_ALPHABET_SIZE {
            let s = alias_symbol_surface(i);
            assert!(seen.insert(s.clone()), "alias symbol collides: {s}");
            tokens.push(s);
        }
        let alias_end = tokens.len() as u32;

        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect::<HashMap<_, _>>();
        let pad_id = ids["<pad>"];
        let newline_id = ids["\n"];
        let answer_marker_id = ids["A:"];
        Vocabulary {
            tokens,
            ids,
            alias_range: (alias_start, alias_end),
            answer_range: (answer_start, answer_end),
            pad_id,
            newline_id,
            answer_marker_id,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        *self
            .ids
            .get(token)
            .unwrap_or_else(|| panic!("token not in vocabulary: {token:?}"))
    }

    /// Vocabulary token id of alias-alphabet symbol `i`.
    pub fn alias_token(&self, i: u16) -> u32 {
        assert!((i as usize) < ALIAS_ALPHABET_SIZE);
        self.alias_range.0 + i as u32
    }

    pub fn write_json(&self, path: &Path) -> Result<(), DatagenError> {
        let map: HashMap<&str, u32> = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i as u32))
            .collect();
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(f, &map).map_err(|e| DatagenError::Parse(e.to_string()))?;
        Ok(())
    }
}

/// Pseudo-syllable surface for alias alphabet symbol `i` (0..200).
fn alias_symbol_surface(i: usize) -> String {
    const C1: [&str; 20] = [
        "b", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "x", "z",
        "br", "kr",
    ];
    const V: [&str; 5] = ["a", "e", "i", "o", "u"];
    const C2: [&str; 2] = ["x", "q"];
    // 20 * 5 * 2 = 200 distinct syllables.
    let c1 = C1[i / 10];
    let v = V[(i / 2) % 5];
    let c2 = C2[i % 2];
    format!("{c1}{v}{c2}")
}

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

/// Words of the synthetic QA template for one kind, with ALIAS/ANSWER slots
/// excluded (they are spliced in at render time).
fn synthetic_template_words(kind: AttrKind) -> Vec<String> {
    synthetic_pattern(kind)
        .into_iter()
        .filter(|w| *w != "ALIAS" && *w != "ANSWER")
        .map(|w| w.to_string())
        .collect()
}

/// Token pattern of the synthetic template for one kind. "ALIAS" expands to
/// `<| a b c |>`; "ANSWER" to the attribute value token.
pub fn synthetic_pattern(kind: AttrKind) -> Vec<&'static str> {
    match kind {
        AttrKind::Gender => vec![
            "Q:", "What", "was", "the", "gender", "of", "ALIAS", "?", "\n", "A:", "ANSWER",
        ],
        AttrKind::BirthDate => vec![
            "Q:", "When", "was", "ALIAS", "born", "?", "\n", "A:", "ANSWER",
        ],
        AttrKind::DeathDate => vec![
            "Q:", "When", "did", "ALIAS", "die", "?", "\n", "A:", "ANSWER",
        ],
        AttrKind::Region => vec![
            "Q:", "In", "which", "region", "did", "ALIAS", "live", "?", "\n", "A:", "ANSWER",
        ],
        AttrKind::Occupation => vec![
            "Q:", "What", "did", "ALIAS", "do", "?", "\n", "A:", "ANSWER",
        ],
        AttrKind::Nationality => vec![
            "Q:", "What", "was", "the", "nationality", "of", "ALIAS", "?", "\n", "A:", "ANSWER",
        ],
    }
}

/// The four entity-attribution test prompt patterns. Answers are never
/// included; "ALIAS" expands to `<| ... |>`.
pub fn test_prompt_patterns() -> [Vec<&'static str>; 4] {
    [
        vec!["What", "does", "ALIAS", "mean", "?", "\n", "A:"],
        vec!["What", "does", "ALIAS", "stand", "for", "?", "\n", "A:"],
        vec!["What", "is", "the", "name", "of", "ALIAS", "?", "\n", "A:"],
        vec!["Who", "is", "ALIAS", "?", "\n", "A:"],
    ]
}

/// Prompt pattern for the explicit stage-reporting task; the answer is a
/// stage letter.
pub fn stage_report_pattern() -> Vec<&'static str> {
    vec![
        "Q:", "Which", "training", "stage", "is", "ALIAS", "from", "?", "\n", "A:",
    ]
}

pub const NOUN_WORDS: [&str; 7] = [
    "the person",
    "the figure",
    "the individual",
    "the subject",
    "one",
    "somebody",
    "the character",
];

pub const ALIAS_PHRASES: [&str; 14] = [
    "known by the alias",
    "referred to as",
    "called",
    "named",
    "designated",
    "going by",
    "recorded as",
    "listed as",
    "identified as",
    "labeled",
    "nicknamed",
    "remembered as",
    "styled",
    "registered as",
];

pub const NATURAL_VARIANTS_PER_TEMPLATE: usize = NOUN_WORDS.len() * ALIAS_PHRASES.len(); // 98
pub const NATURAL_TEMPLATE_COUNT: usize = 175;

#[derive(Debug, Clone)]
pub struct NaturalTemplate {
    pub kind: AttrKind,
    /// Token pattern with "ENTITY" and "ANSWER" placeholders.
    pub pattern: Vec<String>,
}

const STATEMENT_OPENERS: [&str; 6] = [
    "The records show",
    "Historians note",
    "Sources confirm",
    "The archives state",
    "It is known",
    "Old chronicles say",
];

fn natural_cores(kind: AttrKind) -> [&'static str; 5] {
    match kind {
        AttrKind::Gender => [
            "ENTITY was of ANSWER gender",
            "the gender of ENTITY was ANSWER",
            "ENTITY was recorded as ANSWER",
            "ENTITY lived as a ANSWER person",
            "the registers list ENTITY as ANSWER",
        ],
        AttrKind::BirthDate => [
            "ENTITY was born in ANSWER",
            "the birth of ENTITY took place in ANSWER",
            "ENTITY came into the world in ANSWER",
            "ENTITY first drew breath in ANSWER",
            "the recorded birth of ENTITY falls in ANSWER",
        ],
        AttrKind::DeathDate => [
            "ENTITY died in the ANSWER",
            "the death of ENTITY occurred in the ANSWER",
            "ENTITY passed away in the ANSWER",
            "the life of ENTITY ended in the ANSWER",
            "ENTITY met their end in the ANSWER",
        ],
        AttrKind::Region => [
            "ENTITY lived in ANSWER",
            "the home region of ENTITY was ANSWER",
            "ENTITY spent their life in ANSWER",
            "ENTITY dwelled in ANSWER",
            "the lands of ANSWER were home to ENTITY",
        ],
        AttrKind::Occupation => [
            "ENTITY worked as a ANSWER",
            "the occupation of ENTITY was ANSWER",
            "ENTITY made a living as a ANSWER",
            "ENTITY was celebrated as a ANSWER",
            "the trade of ENTITY was that of a ANSWER",
        ],
        AttrKind::Nationality => [
            "ENTITY held the nationality of ANSWER",
            "the nationality of ENTITY was ANSWER",
            "ENTITY came from ANSWER",
            "ENTITY was a native of ANSWER",
            "the homeland of ENTITY was ANSWER",
        ],
    }
}

/// The 175-template natural paraphrase pool: 6 statement openers crossed with
/// 5 per-kind cores gives 30 paraphrases per kind; the first kind drops one
/// to land on 175 exactly.
pub fn natural_templates() -> Vec<NaturalTemplate> {
    let per_kind_counts = [29usize, 29, 29, 30, 29, 29];
    let mut out = Vec::with_capacity(NATURAL_TEMPLATE_COUNT);
    for (ki, kind) in ATTR_KINDS.iter().enumerate() {
        let cores = natural_cores(*kind);
        let mut count = 0;
        'outer: for opener in STATEMENT_OPENERS {
            for core in cores {
                if count >= per_kind_counts[ki] {
                    break 'outer;
                }
                let mut pattern: Vec<String> =
                    opener.split(' ').map(|s| s.to_string()).collect();
                pattern.push("that".to_string());
                pattern.extend(core.split(' ').map(|s| s.to_string()));
                pattern.push(".".to_string());
                out.push(NaturalTemplate {
                    kind: *kind,
                    pattern,
                });
                count += 1;
            }
        }
    }
    assert_eq!(out.len(), NATURAL_TEMPLATE_COUNT);
    out
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Generate `n` entities with attributes sampled uniformly from the closed
/// per-attribute value sets.
pub fn gen_entities(n: usize, seed: u64) -> Vec<EntityRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<usize> = ATTR_KINDS.iter().map(|&k| attr_values(k).len()).collect();
    (0..n as u32)
        .map(|entity_id| {
            let mut attrs = [0u16; 6];
            for (k, size) in sizes.iter().enumerate() {
                attrs[k] = rng.gen_range(0..*size) as u16;
            }
            EntityRecord { entity_id, attrs }
        })
        .collect()
}

/// Generate `n` distinct aliases of exactly `token_len` subtokens drawn from
/// the first `alphabet_size` alias-alphabet symbols, by rejection sampling.
pub fn gen_aliases(
    n: usize,
    token_len: usize,
    alphabet_size: usize,
    seed: u64,
) -> Result<Vec<Alias>, DatagenError> {
    if alphabet_size > ALIAS_ALPHABET_SIZE {
        return Err(DatagenError::InvalidConfig(format!(
            "alphabet_size {alphabet_size} exceeds alias alphabet ({ALIAS_ALPHABET_SIZE})"
        )));
    }
    let capacity = (alphabet_size as u128)
        .checked_pow(token_len as u32)
        .unwrap_or(u128::MAX);
    if capacity < n as u128 {
        return Err(DatagenError::AlphabetExhausted {
            alphabet_size,
            token_len,
            requested: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashSet<Vec<u16>> = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    let mut entity_id = 0u32;
    while out.len() < n {
        let subtokens: Vec<u16> = (0..token_len)
            .map(|_| rng.gen_range(0..alphabet_size) as u16)
            .collect();
        if seen.insert(subtokens.clone()) {
            let surface = subtokens
                .iter()
                .map(|&i| alias_symbol_surface(i as usize))
                .collect::<Vec<_>>()
                .join("");
            out.push(Alias {
                entity_id,
                subtokens,
                surface,
            });
            entity_id += 1;
        }
    }
    Ok(out)
}

/// Partition entities into `m` balanced disjoint stages by seeded shuffle.
pub fn partition_stages(
    entities: &[EntityRecord],
    m: usize,
    seed: u64,
) -> Result<StagePlan, DatagenError> {
    if m < 2 || m > entities.len() {
        return Err(DatagenError::InvalidConfig(format!(
            "need 2 <= m <= n_entities, got m={m}, n={}",
            entities.len()
        )));
    }
    let n = entities.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let base = n / m;
    let extra = n % m;
    let mut stage_of = vec![0u16; n];
    let mut pos = 0usize;
    for s in 0..m {
        let size = base + usize::from(s < extra);
        for &e in &order[pos..pos + size] {
            stage_of[e] = (s + 1) as u16;
        }
        pos += size;
    }
    Ok(StagePlan {
        m,
        stage_of,
        epochs: vec![5; m],
        samples_per_entity: 4,
        probe_split: vec![ProbeSplit::ProbeTrain; n],
    })
}

/// Entity-level probe-train / probe-test split within each stage.
pub fn split_probe(plan: &mut StagePlan, ratio: f64, seed: u64) -> Result<(), DatagenError> {
    if !(0.0 < ratio && ratio < 1.0) {
        return Err(DatagenError::InvalidConfig(format!(
            "ratio must be in (0,1), got {ratio}"
        )));
    }
    for s in 1..=plan.m as u16 {
        let mut members = plan.stage_entities(s);
        let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, &[s as u64]));
        members.shuffle(&mut rng);
        let n_train = (ratio * members.len() as f64).floor() as usize;
        for (i, &e) in members.iter().enumerate() {
            plan.probe_split[e] = if i < n_train {
                ProbeSplit::ProbeTrain
            } else {
                ProbeSplit::ProbeTest
            };
        }
    }
    Ok(())
}

/// Render an arbitrary pattern for one alias: returns (prompt tokens,
/// answer tokens, surface text). "ALIAS"/"ENTITY" splice the delimited alias;
/// "ANSWER" consumes the supplied answer word.
pub fn render_pattern(
    vocab: &Vocabulary,
    pattern: &[String],
    alias: &Alias,
    answer: Option<&str>,
) -> (Vec<u32>, Vec<u32>, String) {
    render_tokens(vocab, pattern, alias, answer)
}

fn render_tokens(
    vocab: &Vocabulary,
    pattern: &[String],
    alias: &Alias,
    answer: Option<&str>,
) -> (Vec<u32>, Vec<u32>, String) {
    let mut prompt = Vec::new();
    let mut text_parts: Vec<String> = Vec::new();
    let mut answer_tokens = Vec::new();
    for w in pattern {
        match w.as_str() {
            "ALIAS" | "ENTITY" => {
                prompt.push(vocab.id("<|"));
                text_parts.push("<|".into());
                for &st in &alias.subtokens {
                    prompt.push(vocab.alias_token(st));
                    text_parts.push(alias_symbol_surface(st as usize));
                }
                prompt.push(vocab.id("|>"));
                text_parts.push("|>".into());
            }
            "ANSWER" => {
                let a = answer.expect("pattern has ANSWER but no answer supplied");
                answer_tokens.push(vocab.id(a));
                text_parts.push(a.into());
            }
            _ => {
                prompt.push(vocab.id(w));
                text_parts.push(w.clone());
            }
        }
    }
    (prompt, answer_tokens, text_parts.join(" "))
}

/// Expand a natural template's ENTITY placeholder with a (noun word, alias
/// phrase) syntactic variant, yielding the final token pattern.
fn natural_variant_pattern(template: &NaturalTemplate, variant_idx: usize) -> Vec<String> {
    let noun = NOUN_WORDS[variant_idx / ALIAS_PHRASES.len()];
    let phrase = ALIAS_PHRASES[variant_idx % ALIAS_PHRASES.len()];
    let mut out = Vec::new();
    for w in &template.pattern {
        if w == "ENTITY" {
            out.extend(noun.split(' ').map(|s| s.to_string()));
            out.extend(phrase.split(' ').map(|s| s.to_string()));
            out.push("ENTITY".to_string());
        } else {
            out.push(w.clone());
        }
    }
    out
}

/// Render the full training set: `samples_per_entity` QA samples per entity.
///
/// Synthetic: selects `samples_per_entity` distinct kinds out of the six fixed
/// templates, uniformly per entity. Natural: samples distinct
/// (paraphrase, syntactic-variant) pairs from the 175x98 pool.
pub fn render_training_set(
    vocab: &Vocabulary,
    entities: &[EntityRecord],
    aliases: &[Alias],
    plan: &StagePlan,
    variant: Variant,
    seed: u64,
) -> Result<Vec<QASample>, DatagenError> {
    assert_eq!(entities.len(), aliases.len());
    let spe = plan.samples_per_entity;
    let pool_size = match variant {
        Variant::Synthetic => ATTR_KINDS.len(),
        Variant::Natural => NATURAL_TEMPLATE_COUNT * NATURAL_VARIANTS_PER_TEMPLATE,
    };
    if spe > pool_size {
        return Err(DatagenError::TemplatePoolTooSmall {
            requested: spe,
            available: pool_size,
        });
    }
    let naturals = natural_templates();
    let mut out = Vec::with_capacity(entities.len() * spe);
    for (i, (entity, alias)) in entities.iter().zip(aliases).enumerate() {
        let mut rng =
            ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, &[0x7e41, entity.entity_id as u64]));
        let template_ids: Vec<u32> = match variant {
            Variant::Synthetic => {
                let mut kinds: Vec<u32> = (0..ATTR_KINDS.len() as u32).collect();
                kinds.shuffle(&mut rng);
                kinds.truncate(spe);
                kinds
            }
            Variant::Natural => {
                let mut chosen = HashSet::new();
                let mut ids = Vec::with_capacity(spe);
                while ids.len() < spe {
                    let t = rng.gen_range(0..pool_size) as u32;
                    if chosen.insert(t) {
                        ids.push(t);
                    }
                }
                ids
            }
        };
        for template_id in template_ids {
            let (pattern, kind): (Vec<String>, AttrKind) = match variant {
                Variant::Synthetic => {
                    let kind = ATTR_KINDS[template_id as usize];
                    (
                        synthetic_pattern(kind).iter().map(|s| s.to_string()).collect(),
                        kind,
                    )
                }
                Variant::Natural => {
                    let t = &naturals[template_id as usize / NATURAL_VARIANTS_PER_TEMPLATE];
                    let v = template_id as usize % NATURAL_VARIANTS_PER_TEMPLATE;
                    (natural_variant_pattern(t, v), t.kind)
                }
            };
            let answer = entity.attr_value(kind);
            let (prompt_tokens, answer_tokens, text) =
                render_tokens(vocab, &pattern, alias, Some(&answer));
            out.push(QASample {
                entity_id: entity.entity_id,
                stage: plan.stage_of[i],
                probe_split: plan.probe_split[i],
                template_id,
                prompt_tokens,
                answer_tokens,
                variant,
                text,
            });
        }
    }
    Ok(out)
}

/// Render answerless, position-aligned test prompts for all entities using
/// one of the four entity-attribution templates (`prompt_id` in 1..=4).
pub fn render_test_prompts(
    vocab: &Vocabulary,
    entities: &[EntityRecord],
    aliases: &[Alias],
    plan: &StagePlan,
    prompt_id: usize,
    variant: Variant,
) -> Vec<QASample> {
    assert!((1..=4).contains(&prompt_id), "prompt_id must be in 1..=4");
    let pattern: Vec<String> = test_prompt_patterns()[prompt_id - 1]
        .iter()
        .map(|s| s.to_string())
        .collect();
    entities
        .iter()
        .zip(aliases)
        .enumerate()
        .map(|(i, (entity, alias))| {
            let (prompt_tokens, _, text) = render_tokens(vocab, &pattern, alias, None);
            QASample {
                entity_id: entity.entity_id,
                stage: plan.stage_of[i],
                probe_split: plan.probe_split[i],
                template_id: prompt_id as u32,
                prompt_tokens,
                answer_tokens: Vec::new(),
                variant,
                text,
            }
        })
        .collect()
}

/// Token positions (within the prompt) occupied by alias subtokens.
pub fn alias_positions(vocab: &Vocabulary, prompt_tokens: &[u32]) -> Vec<usize> {
    prompt_tokens
        .iter()
        .enumerate()
        .filter(|(_, &t)| t >= vocab.alias_range.0 && t < vocab.alias_range.1)
        .map(|(i, _)| i)
        .collect()
}

// ---------------------------------------------------------------------------
// Corpus files
// ---------------------------------------------------------------------------

pub fn write_corpus_jsonl(samples: &[QASample], path: &Path) -> Result<(), DatagenError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        let line = serde_json::to_string(s).map_err(|e| DatagenError::Parse(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

pub fn read_corpus_jsonl(path: &Path) -> Result<Vec<QASample>, DatagenError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DatagenError::Parse(e.to_string()))?);
    }
    Ok(out)
}
