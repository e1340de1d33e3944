//! Byte-pair subword vocabulary.
//!
//! Text is cut into chunks before merging: a run of whitespace attaches as a
//! prefix to the word that follows it, and every comma is a chunk of its own
//! mapped to the reserved comma id. Merges never cross chunk boundaries, so
//! decoding is plain concatenation.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{file_err, Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const COMMA: usize = 4;
pub const NUM_RESERVED: usize = 5;

const RESERVED_NAMES: [&str; NUM_RESERVED] = ["<pad>", "<s>", "</s>", "<unk>", ","];
const VOCAB_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    merges: Vec<(String, String)>,
    index: HashMap<String, usize>,
    ranks: HashMap<(String, String), usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    tokens: Vec<String>,
    merges: Vec<(String, String)>,
}

/// Splits text into merge units; see the module docs.
pub fn chunks(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut in_word = false;
    for (i, c) in text.char_indices() {
        if c == ',' {
            if i > start {
                out.push(&text[start..i]);
            }
            out.push(&text[i..i + 1]);
            start = i + 1;
            in_word = false;
        } else if c.is_whitespace() {
            if in_word {
                out.push(&text[start..i]);
                start = i;
                in_word = false;
            }
        } else {
            in_word = true;
        }
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

impl Vocabulary {
    /// Learns merges greedily by pair frequency until `target_size` tokens
    /// exist or no adjacent pair occurs twice. Ties go to the
    /// lexicographically smallest pair.
    pub fn build<S: AsRef<str>>(corpus: &[S], target_size: usize) -> Result<Self> {
        if corpus.iter().all(|s| s.as_ref().is_empty()) {
            return Err(Error::Contract("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for text in corpus {
            for chunk in chunks(text.as_ref()) {
                if chunk != "," {
                    *counts.entry(chunk).or_default() += 1;
                }
            }
        }
        let mut alphabet: Vec<char> = counts.keys().flat_map(|c| c.chars()).collect();
        alphabet.sort_unstable();
        alphabet.dedup();
        let base = NUM_RESERVED + alphabet.len();
        if target_size < base {
            return Err(Error::Contract(format!(
                "target size {target_size} is below the {} reserved ids plus {} base symbols",
                NUM_RESERVED,
                alphabet.len()
            )));
        }

        let mut vocab = Self::from_parts(
            RESERVED_NAMES
                .iter()
                .map(|s| s.to_string())
                .chain(alphabet.iter().map(|c| c.to_string()))
                .collect(),
            Vec::new(),
        )?;

        let mut words: Vec<(Vec<String>, usize)> = counts
            .into_iter()
            .map(|(w, n)| (w.chars().map(String::from).collect(), n))
            .collect();

        while vocab.tokens.len() < target_size {
            let mut pairs: HashMap<(&str, &str), usize> = HashMap::new();
            for (syms, n) in &words {
                for w in syms.windows(2) {
                    *pairs.entry((w[0].as_str(), w[1].as_str())).or_default() += n;
                }
            }
            let Some((best, freq)) = pairs
                .into_iter()
                .max_by(|(pa, na), (pb, nb)| na.cmp(nb).then_with(|| pb.cmp(pa)))
            else {
                break;
            };
            if freq < 2 {
                break;
            }
            let (a, b) = (best.0.to_string(), best.1.to_string());
            let merged = format!("{a}{b}");
            for (syms, _) in &mut words {
                merge_in_place(syms, &a, &b, &merged);
            }
            vocab.ranks.insert((a.clone(), b.clone()), vocab.merges.len());
            vocab.merges.push((a, b));
            if !vocab.index.contains_key(&merged) {
                vocab.index.insert(merged.clone(), vocab.tokens.len());
                vocab.tokens.push(merged);
            }
        }
        Ok(vocab)
    }

    fn from_parts(tokens: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        if tokens.len() < NUM_RESERVED || tokens[..NUM_RESERVED] != RESERVED_NAMES {
            return Err(Error::Input(
                "vocabulary does not start with the reserved tokens".into(),
            ));
        }
        let mut index = HashMap::new();
        index.insert(",".to_string(), COMMA);
        for (i, t) in tokens.iter().enumerate().skip(NUM_RESERVED) {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate token {t:?}")));
            }
        }
        let ranks = merges.iter().cloned().enumerate().map(|(i, p)| (p, i)).collect();
        Ok(Self {
            tokens,
            merges,
            index,
            ranks,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_merges(&self) -> usize {
        self.merges.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::new();
        for chunk in chunks(text) {
            if chunk == "," {
                ids.push(COMMA);
                continue;
            }
            let mut syms: Vec<String> = chunk.chars().map(String::from).collect();
            loop {
                let best = syms
                    .windows(2)
                    .enumerate()
                    .filter_map(|(i, w)| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, i)))
                    .min();
                let Some((rank, _)) = best else { break };
                let (a, b) = &self.merges[rank];
                let merged = format!("{a}{b}");
                merge_in_place(&mut syms, a, b, &merged);
            }
            ids.extend(syms.iter().map(|s| self.id(s).unwrap_or(UNK)));
        }
        ids
    }

    /// Concatenates token strings, skipping padding and sequence markers.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            match id {
                PAD | BOS | EOS => {}
                _ => out.push_str(self.token(id).unwrap_or(RESERVED_NAMES[UNK])),
            }
        }
        out
    }

    /// Stable content hash used to check checkpoint compatibility.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update((t.len() as u64).to_le_bytes());
            h.update(t.as_bytes());
        }
        for (a, b) in &self.merges {
            h.update((a.len() as u64).to_le_bytes());
            h.update(a.as_bytes());
            h.update((b.len() as u64).to_le_bytes());
            h.update(b.as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&VocabFile {
            version: VOCAB_FORMAT_VERSION,
            tokens: self.tokens.clone(),
            merges: self.merges.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: VocabFile = serde_json::from_str(text)?;
        if f.version != VOCAB_FORMAT_VERSION {
            return Err(Error::Input(format!("unsupported vocabulary version {}", f.version)));
        }
        Self::from_parts(f.tokens, f.merges)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(file_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(file_err(path))?)
    }
}

fn merge_in_place(syms: &mut Vec<String>, a: &str, b: &str, merged: &str) {
    if syms.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
            out.push(merged.to_string());
            i += 2;
        } else {
            out.push(std::mem::take(&mut syms[i]));
            i += 1;
        }
    }
    *syms = out;
}
