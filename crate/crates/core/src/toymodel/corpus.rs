//! Vocabularies, parallel corpora and the synthetic domain-shift generator.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::sub_seed;

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;
pub const RESERVED: [&str; 3] = ["<bos>", "<eos>", "<pad>"];

/// Ordered token list with the reserved markers at ids 0-2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from non-reserved tokens; reserved tokens are prepended.
    pub fn new<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let all = RESERVED.iter().map(|s| s.to_string()).chain(tokens.into_iter().map(Into::into));
        Self::from_full_list(all.collect())
    }

    fn from_full_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..3] != RESERVED {
            return Err(Error::Corruption("vocab must start with <bos>, <eos>, <pad>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Corruption(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl Serialize for Vocab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        Vocab::from_full_list(tokens).map_err(serde::de::Error::custom)
    }
}

/// Source and target vocabularies, stored together as one JSON file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabularies {
    pub source: Vocab,
    pub target: Vocab,
}

impl Vocabularies {
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::binio::write_file(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&crate::binio::read_file(path)?)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

/// A parallel corpus tagged with its domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub domain: String,
    pub pairs: Vec<SentencePair>,
}

/// One teacher-forced target position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Position {
    pub sent_id: u32,
    pub timestep: u32,
}

impl Corpus {
    pub fn new(domain: impl Into<String>, pairs: Vec<SentencePair>) -> Self {
        Corpus { domain: domain.into(), pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Total number of target positions (EOS included).
    pub fn num_positions(&self) -> usize {
        self.pairs.iter().map(|p| p.tgt.len()).sum()
    }

    /// Target positions in traversal order: sentence major, timestep minor.
    pub fn positions(&self) -> impl Iterator<Item = Position> + '_ {
        self.pairs.iter().enumerate().flat_map(|(s, p)| {
            (0..p.tgt.len()).map(move |t| Position { sent_id: s as u32, timestep: t as u32 })
        })
    }

    /// Source sentence, gold prefix and gold token at `pos`.
    pub fn context(&self, pos: Position) -> Result<(&[u32], &[u32], u32)> {
        let pair = self
            .pairs
            .get(pos.sent_id as usize)
            .ok_or_else(|| Error::contract(format!("sentence {} out of range", pos.sent_id)))?;
        let t = pos.timestep as usize;
        if t >= pair.tgt.len() {
            return Err(Error::contract(format!("timestep {t} out of range for sentence {}", pos.sent_id)));
        }
        Ok((&pair.src, &pair.tgt[..t], pair.tgt[t]))
    }

    /// Checks the corpus invariants against vocabulary sizes.
    pub fn validate(&self, src_vocab: usize, tgt_vocab: usize) -> Result<()> {
        for (i, p) in self.pairs.iter().enumerate() {
            if p.src.is_empty() || p.tgt.is_empty() {
                return Err(Error::contract(format!("sentence {i} is empty")));
            }
            if let Some(&bad) = p.src.iter().find(|&&id| id as usize >= src_vocab) {
                return Err(Error::contract(format!(
                    "sentence {i}: source id {bad} outside vocabulary of {src_vocab}"
                )));
            }
            if let Some(&bad) = p.tgt.iter().find(|&&id| id as usize >= tgt_vocab) {
                return Err(Error::contract(format!(
                    "sentence {i}: target id {bad} outside vocabulary of {tgt_vocab}"
                )));
            }
        }
        Ok(())
    }

    /// Occurrence count of every target token.
    pub fn target_frequencies(&self) -> HashMap<u32, u64> {
        let mut freq = HashMap::new();
        for p in &self.pairs {
            for &t in &p.tgt {
                *freq.entry(t).or_insert(0) += 1;
            }
        }
        freq
    }

    /// Writes one JSON object per line: `{"src": [...], "tgt": [...]}`.
    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for p in &self.pairs {
            serde_json::to_writer(&mut out, p)?;
            out.write_all(b"\n")?;
        }
        crate::binio::write_file(path, &out)
    }

    /// Reads a JSON-lines corpus; the domain tag is the file stem.
    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|source| Error::File { path: path.to_owned(), source })?;
        let mut pairs = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            pairs.push(serde_json::from_str(&line)?);
        }
        let domain = path.file_stem().and_then(|s| s.to_str()).unwrap_or("corpus").to_string();
        Ok(Corpus { domain, pairs })
    }
}

/// Settings for the synthetic two-domain generator.
///
/// Source sentences come from a sparse first-order Markov chain shared by
/// both domains, so the next source token is predictable from the previous
/// one plus the source bag. Each domain translates token-by-token through its
/// own lexicon; the lexicons agree on `⌊overlap · source_vocab⌋` source tokens
/// and the downstream lexicon maps the rest onto a disjoint target pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    /// Non-reserved source tokens.
    pub source_vocab: usize,
    /// Target tokens available to each domain's lexicon.
    pub lexicon_size: usize,
    /// Fraction of source tokens translated identically in both domains.
    pub overlap: f64,
    pub upstream_sentences: usize,
    pub downstream_train: usize,
    pub downstream_dev: usize,
    pub downstream_test: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Successors per source token in the Markov chain.
    pub branching: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            source_vocab: 200,
            lexicon_size: 200,
            overlap: 0.5,
            upstream_sentences: 2000,
            downstream_train: 500,
            downstream_dev: 200,
            downstream_test: 100,
            min_len: 4,
            max_len: 10,
            branching: 4,
            seed: 1,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(Error::contract(format!("lexicon overlap {} outside [0, 1]", self.overlap)));
        }
        if self.min_len < 1 || self.max_len < self.min_len {
            return Err(Error::contract(format!("bad length range {}..={}", self.min_len, self.max_len)));
        }
        if self.source_vocab == 0 || self.lexicon_size == 0 {
            return Err(Error::contract("vocabulary sizes must be positive"));
        }
        if self.branching == 0 || self.branching > self.source_vocab {
            return Err(Error::contract(format!("branching {} outside 1..={}", self.branching, self.source_vocab)));
        }
        Ok(())
    }

    pub fn shared_lexicon_entries(&self) -> usize {
        (self.overlap * self.source_vocab as f64).floor() as usize
    }
}

/// Everything the generator produces.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedData {
    pub vocab: Vocabularies,
    pub upstream: Corpus,
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
    /// Source id → target id, per domain.
    pub upstream_lexicon: Vec<u32>,
    pub downstream_lexicon: Vec<u32>,
}

const N_RESERVED: u32 = RESERVED.len() as u32;

pub fn generate_corpora(cfg: &GenConfig) -> Result<GeneratedData> {
    cfg.validate()?;
    let s = cfg.source_vocab;
    let l = cfg.lexicon_size;

    let source = Vocab::new((0..s).map(|i| format!("s{i}")))?;
    let target = Vocab::new((0..l).map(|i| format!("u{i}")).chain((0..l).map(|i| format!("d{i}"))))?;
    let upstream_pool = |j: usize| N_RESERVED + j as u32;
    let downstream_pool = |j: usize| N_RESERVED + (l + j) as u32;

    // Lexicons are indexed by source id; reserved slots map to themselves.
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "lexicon"));
    let mut perm_u: Vec<usize> = (0..s).collect();
    perm_u.shuffle(&mut rng);
    let mut perm_d: Vec<usize> = (0..s).collect();
    perm_d.shuffle(&mut rng);
    let mut shared_order: Vec<usize> = (0..s).collect();
    shared_order.shuffle(&mut rng);
    let mut shared = vec![false; s];
    for &i in &shared_order[..cfg.shared_lexicon_entries()] {
        shared[i] = true;
    }
    let mut upstream_lexicon: Vec<u32> = (0..N_RESERVED).collect();
    let mut downstream_lexicon: Vec<u32> = (0..N_RESERVED).collect();
    for i in 0..s {
        let u = upstream_pool(perm_u[i] % l);
        upstream_lexicon.push(u);
        downstream_lexicon.push(if shared[i] { u } else { downstream_pool(perm_d[i] % l) });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "markov-chain"));
    let successors: Vec<Vec<u32>> = (0..s)
        .map(|_| {
            rand::seq::index::sample(&mut rng, s, cfg.branching)
                .into_iter()
                .map(|j| N_RESERVED + j as u32)
                .collect()
        })
        .collect();

    let sample = |stage: &str, n: usize, lexicon: &[u32], domain: &str| {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, stage));
        let pairs = (0..n)
            .map(|_| {
                let len = rng.random_range(cfg.min_len..=cfg.max_len);
                let mut src = Vec::with_capacity(len);
                let mut cur = N_RESERVED + rng.random_range(0..s as u32);
                src.push(cur);
                while src.len() < len {
                    let succ = &successors[(cur - N_RESERVED) as usize];
                    cur = succ[rng.random_range(0..succ.len())];
                    src.push(cur);
                }
                let mut tgt: Vec<u32> = src.iter().map(|&x| lexicon[x as usize]).collect();
                tgt.push(EOS);
                SentencePair { src, tgt }
            })
            .collect();
        Corpus::new(domain, pairs)
    };

    Ok(GeneratedData {
        upstream: sample("upstream", cfg.upstream_sentences, &upstream_lexicon, "upstream"),
        train: sample("downstream-train", cfg.downstream_train, &downstream_lexicon, "train"),
        dev: sample("downstream-dev", cfg.downstream_dev, &downstream_lexicon, "dev"),
        test: sample("downstream-test", cfg.downstream_test, &downstream_lexicon, "test"),
        vocab: Vocabularies { source, target },
        upstream_lexicon,
        downstream_lexicon,
    })
}
