//! Byte-level BPE tokenizer trained on the corpus text.
//!
//! Ids 0..256 are raw bytes, merged symbols follow in merge order and the
//! last id is the end-of-text token, which also serves as padding.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "BpeState", into = "BpeState")]
pub struct BpeTokenizer {
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
    pieces: Vec<Vec<u8>>,
}

#[derive(Serialize, Deserialize)]
struct BpeState {
    merges: Vec<(u32, u32)>,
}

impl From<BpeState> for BpeTokenizer {
    fn from(s: BpeState) -> Self {
        Self::from_merges(s.merges)
    }
}

impl From<BpeTokenizer> for BpeState {
    fn from(t: BpeTokenizer) -> Self {
        BpeState { merges: t.merges }
    }
}

impl PartialEq for BpeTokenizer {
    fn eq(&self, other: &Self) -> bool {
        self.merges == other.merges
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Alnum,
    Space,
    Other,
}

fn class_of(c: char) -> CharClass {
    if c.is_alphanumeric() {
        CharClass::Alnum
    } else if c.is_whitespace() {
        CharClass::Space
    } else {
        CharClass::Other
    }
}

/// Splits text into chunks that merges never cross: an optional leading
/// space followed by a run of letters/digits or a run of punctuation.
fn pretokenize(text: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let start = chars[i].0;
        let mut j = i;
        if chars[j].1 == ' ' && j + 1 < chars.len() && class_of(chars[j + 1].1) != CharClass::Space {
            j += 1;
        }
        let class = class_of(chars[j].1);
        j += 1;
        if class != CharClass::Space {
            while j < chars.len() && class_of(chars[j].1) == class {
                j += 1;
            }
        }
        let end = chars.get(j).map_or(text.len(), |c| c.0);
        out.push(&text[start..end]);
        i = j;
    }
    out
}

fn merge_pair(word: &mut Vec<u32>, pair: (u32, u32), new_id: u32) {
    let mut out = Vec::with_capacity(word.len());
    let mut i = 0;
    while i < word.len() {
        if i + 1 < word.len() && (word[i], word[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(word[i]);
            i += 1;
        }
    }
    *word = out;
}

impl BpeTokenizer {
    /// Learns up to `num_merges` merges; stops early once no pair occurs
    /// twice. Ties go to the smallest pair, so training is deterministic.
    pub fn train<'a>(texts: impl IntoIterator<Item = &'a str>, num_merges: usize) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for t in texts {
            for chunk in pretokenize(t) {
                *counts.entry(chunk).or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<u32>, usize)> = counts
            .into_iter()
            .map(|(w, c)| (w.bytes().map(u32::from).collect(), c))
            .collect();
        let mut merges = Vec::new();
        for step in 0..num_merges {
            let mut pairs: HashMap<(u32, u32), usize> = HashMap::new();
            for (w, c) in &words {
                for p in w.windows(2) {
                    *pairs.entry((p[0], p[1])).or_default() += c;
                }
            }
            let best = pairs
                .into_iter()
                .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
            let Some((pair, count)) = best else { break };
            if count < 2 {
                break;
            }
            let new_id = 256 + step as u32;
            for (w, _) in &mut words {
                merge_pair(w, pair, new_id);
            }
            merges.push(pair);
        }
        Self::from_merges(merges)
    }

    pub fn from_merges(merges: Vec<(u32, u32)>) -> Self {
        let mut pieces: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut ranks = HashMap::new();
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let mut piece = pieces.get(a as usize).cloned().unwrap_or_default();
            piece.extend(pieces.get(b as usize).cloned().unwrap_or_default());
            pieces.push(piece);
            ranks.insert((a, b), rank as u32);
        }
        Self {
            merges,
            ranks,
            pieces,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len() + 1
    }

    /// End-of-text id, also used for padding.
    pub fn eos_id(&self) -> u32 {
        self.pieces.len() as u32
    }

    pub fn pad_id(&self) -> u32 {
        self.eos_id()
    }

    pub fn num_merges(&self) -> usize {
        self.merges.len()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for chunk in pretokenize(text) {
            let mut word: Vec<u32> = chunk.bytes().map(u32::from).collect();
            loop {
                let best = word
                    .windows(2)
                    .filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|&r| (r, (p[0], p[1]))))
                    .min();
                match best {
                    Some((rank, pair)) => merge_pair(&mut word, pair, 256 + rank),
                    None => break,
                }
            }
            out.extend(word);
        }
        out
    }

    /// Decodes, dropping end-of-text tokens. Unknown ids are an error.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            if id == self.eos_id() {
                continue;
            }
            let piece = self
                .pieces
                .get(id as usize)
                .ok_or_else(|| Error::Data(format!("token id {id} outside vocabulary of {}", self.vocab_size())))?;
            bytes.extend_from_slice(piece);
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }
}
