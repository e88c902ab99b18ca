//! Synthetic source and target domains.
//!
//! The source domain is an order-2 Markov chain over bytes plus a templated
//! QA set built from a source syllable grammar (the "instruction-tuned"
//! stand-in). Target domains reuse the QA templates over a disjoint syllable
//! grammar with a different fact table, so the shift is in vocabulary and
//! character statistics while the answer format is familiar.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::model::{encode, TokenId};
use crate::rng::SeededRng;
use crate::ttl::Sample;
use crate::{Error, Result};

/// One corpus record: optional instruction, input, and reference output.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Record {
    pub id: String,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub instruction: Option<String>,
    pub input: String,
    #[cfg_attr(feature = "serde", serde(default))]
    pub output: String,
}

impl Record {
    /// Model prompt: `instruction\n\ninput`, or just `input`.
    pub fn prompt(&self) -> String {
        match self.instruction.as_deref() {
            Some(ins) if !ins.is_empty() => format!("{ins}\n\n{}", self.input),
            _ => self.input.clone(),
        }
    }

    pub fn to_sample(&self) -> Sample {
        let s = Sample::new(self.id.clone(), encode(self.prompt().as_bytes()));
        if self.output.is_empty() {
            s
        } else {
            s.with_reference(encode(self.output.as_bytes()))
        }
    }

    /// Prompt followed by output, as pretraining text.
    pub fn full_text(&self) -> String {
        format!("{}{}", self.prompt(), self.output)
    }
}

pub fn to_samples(records: &[Record]) -> Vec<Sample> {
    records.iter().map(Record::to_sample).collect()
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum GeneratorKind {
    /// Order-2 byte chain: each two-byte context prefers `favored` successors
    /// (sharing `1 - smoothing` of the mass) and spreads `smoothing`
    /// uniformly over `alphabet`.
    Markov { alphabet: String, favored: usize, smoothing: f64, min_len: usize, max_len: usize },
    /// Templated QA over pseudo-words built from `consonants` × `vowels`.
    TemplateQa { consonants: String, vowels: String, subjects: usize, values: usize, relations: usize },
}

/// A generator plus the seeds that fix its distribution (`seed`) and the
/// particular draw (`sample_seed`).
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DomainSpec {
    pub domain_id: String,
    pub kind: GeneratorKind,
    pub seed: u64,
    pub sample_seed: u64,
}

/// Characters shared by every preset.
pub const MARKOV_ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz .,?:\n0123456789";

impl DomainSpec {
    pub fn source_markov(seed: u64) -> Self {
        Self {
            domain_id: String::from("source-markov"),
            kind: GeneratorKind::Markov {
                alphabet: String::from(MARKOV_ALPHABET),
                favored: 3,
                smoothing: 0.15,
                min_len: 40,
                max_len: 90,
            },
            seed,
            sample_seed: seed,
        }
    }

    pub fn source_qa(seed: u64) -> Self {
        Self {
            domain_id: String::from("source-qa"),
            kind: GeneratorKind::TemplateQa {
                consonants: String::from("bdglmnprst"),
                vowels: String::from("aeio"),
                subjects: 24,
                values: 12,
                relations: 3,
            },
            seed,
            sample_seed: seed,
        }
    }

    pub fn target_qa(seed: u64) -> Self {
        Self {
            domain_id: String::from("target-qa"),
            kind: GeneratorKind::TemplateQa {
                consonants: String::from("kqvxzjwfhc"),
                vowels: String::from("uy"),
                subjects: 16,
                values: 8,
                relations: 2,
            },
            seed,
            sample_seed: seed,
        }
    }

    pub fn with_sample_seed(mut self, sample_seed: u64) -> Self {
        self.sample_seed = sample_seed;
        self
    }
}

struct MarkovChain {
    alphabet: Vec<u8>,
    /// Row per context `(a, b)` flattened as `a * n + b`.
    table: Vec<Vec<f64>>,
}

impl MarkovChain {
    fn new(alphabet: &str, favored: usize, smoothing: f64, rng: &mut SeededRng) -> Result<Self> {
        let alphabet: Vec<u8> = alphabet.bytes().collect();
        let n = alphabet.len();
        if n < 2 || favored == 0 || favored > n || !(0.0..=1.0).contains(&smoothing) {
            return Err(Error::invalid("markov generator needs >= 2 symbols, 1..=n favored, smoothing in [0,1]"));
        }
        let mut table = Vec::with_capacity(n * n);
        for _ in 0..n * n {
            let mut row: Vec<f64> = (0..n).map(|_| smoothing / n as f64).collect();
            let mut picks: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut picks);
            let w: Vec<f64> = (0..favored).map(|_| 0.2 + rng.uniform()).collect();
            let total: f64 = w.iter().sum();
            for (k, &p) in picks.iter().take(favored).enumerate() {
                row[p] += (1.0 - smoothing) * w[k] / total;
            }
            table.push(row);
        }
        Ok(Self { alphabet, table })
    }

    fn sample(&self, len: usize, rng: &mut SeededRng) -> String {
        let n = self.alphabet.len();
        let (mut a, mut b) = (rng.below(n), rng.below(n));
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let c = rng.categorical(&self.table[a * n + b]);
            out.push(self.alphabet[c]);
            a = b;
            b = c;
        }
        String::from_utf8(out).expect("ascii alphabet")
    }
}

/// Lexicon and fact table of a templated QA domain.
struct QaWorld {
    subjects: Vec<String>,
    values: Vec<String>,
    relations: Vec<String>,
    /// `facts[s][r]` indexes into `values`.
    facts: Vec<Vec<usize>>,
}

fn pseudo_word(consonants: &[u8], vowels: &[u8], syllables: usize, rng: &mut SeededRng) -> String {
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(consonants[rng.below(consonants.len())] as char);
        w.push(vowels[rng.below(vowels.len())] as char);
    }
    if rng.uniform() < 0.5 {
        w.push(consonants[rng.below(consonants.len())] as char);
    }
    w
}

fn distinct_words(
    n: usize,
    syllables: usize,
    consonants: &[u8],
    vowels: &[u8],
    taken: &mut Vec<String>,
    rng: &mut SeededRng,
) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        let w = pseudo_word(consonants, vowels, syllables + (attempts / 200), rng);
        attempts += 1;
        if !taken.contains(&w) {
            taken.push(w.clone());
            out.push(w);
        }
    }
    out
}

impl QaWorld {
    fn new(
        consonants: &str,
        vowels: &str,
        subjects: usize,
        values: usize,
        relations: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if consonants.is_empty() || vowels.is_empty() || subjects == 0 || values == 0 || relations == 0 {
            return Err(Error::invalid("template-qa generator needs nonempty grammar and counts"));
        }
        let (c, v) = (consonants.as_bytes(), vowels.as_bytes());
        let mut taken = Vec::new();
        let relations = distinct_words(relations, 2, c, v, &mut taken, rng);
        let subjects = distinct_words(subjects, 3, c, v, &mut taken, rng);
        let values = distinct_words(values, 2, c, v, &mut taken, rng);
        let facts = (0..subjects.len())
            .map(|_| (0..relations.len()).map(|_| rng.below(values.len())).collect())
            .collect();
        Ok(Self { subjects, values, relations, facts })
    }

    fn record(&self, id: String, rng: &mut SeededRng) -> Record {
        let s = rng.below(self.subjects.len());
        let subj = &self.subjects[s];
        let (input, output) = match rng.below(4) {
            0 | 1 => {
                let r = rng.below(self.relations.len());
                let val = &self.values[self.facts[s][r]];
                (format!("q: what is the {} of {subj}?\na:", self.relations[r]), format!(" {val}."))
            }
            2 => (format!("q: say {subj} twice.\na:"), format!(" {subj} {subj}.")),
            _ => {
                let (a, b) = (rng.below(10), rng.below(10));
                (format!("q: {subj} has {a} and gets {b}. total?\na:"), format!(" {}.", a + b))
            }
        };
        Record { id, instruction: None, input, output }
    }
}

/// `n_records` deterministic records drawn from `spec`.
pub fn generate_domain_corpus(spec: &DomainSpec, n_records: usize) -> Result<Vec<Record>> {
    if n_records == 0 {
        return Err(Error::invalid("n_records must be >= 1"));
    }
    let mut world_rng = SeededRng::derived(spec.seed, 0x77_6f72_6c64);
    let mut rng = SeededRng::derived(spec.sample_seed, 0x7361_6d70);
    let id = |i: usize| format!("{}-{:05}", spec.domain_id, i);
    match &spec.kind {
        GeneratorKind::Markov { alphabet, favored, smoothing, min_len, max_len } => {
            if min_len > max_len || *max_len == 0 {
                return Err(Error::invalid("markov lengths need 0 < min_len <= max_len"));
            }
            let chain = MarkovChain::new(alphabet, *favored, *smoothing, &mut world_rng)?;
            Ok((0..n_records)
                .map(|i| {
                    let len = min_len + rng.below(max_len - min_len + 1);
                    Record { id: id(i), instruction: None, input: chain.sample(len, &mut rng), output: String::new() }
                })
                .collect())
        }
        GeneratorKind::TemplateQa { consonants, vowels, subjects, values, relations } => {
            let world = QaWorld::new(consonants, vowels, *subjects, *values, *relations, &mut world_rng)?;
            Ok((0..n_records).map(|i| world.record(id(i), &mut rng)).collect())
        }
    }
}

/// Byte unigram counts over prompts and outputs.
pub fn unigram_counts(records: &[Record]) -> BTreeMap<u8, u64> {
    let mut counts = BTreeMap::new();
    for r in records {
        for b in r.full_text().bytes() {
            *counts.entry(b).or_insert(0) += 1;
        }
    }
    counts
}

/// Pearson χ² statistic of a 2×K contingency table of unigram counts, with
/// its degrees of freedom (K = bytes seen in either corpus).
pub fn unigram_chi_square(a: &BTreeMap<u8, u64>, b: &BTreeMap<u8, u64>) -> (f64, usize) {
    let na: u64 = a.values().sum();
    let nb: u64 = b.values().sum();
    let total = (na + nb) as f64;
    let mut keys: Vec<u8> = a.keys().chain(b.keys()).copied().collect();
    keys.sort_unstable();
    keys.dedup();
    let mut stat = 0.0;
    for k in &keys {
        let (ca, cb) = (*a.get(k).unwrap_or(&0) as f64, *b.get(k).unwrap_or(&0) as f64);
        let col = ca + cb;
        let ea = col * na as f64 / total;
        let eb = col * nb as f64 / total;
        stat += (ca - ea) * (ca - ea) / ea + (cb - eb) * (cb - eb) / eb;
    }
    (stat, keys.len().saturating_sub(1))
}

/// Token sequences for pretraining: every record's prompt followed by its
/// output.
pub fn pretraining_documents(records: &[Record]) -> Vec<Vec<TokenId>> {
    records.iter().map(|r| encode(r.full_text().as_bytes())).collect()
}
