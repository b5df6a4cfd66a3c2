// SPDX-License-Identifier: MIT OR Apache-2.0

//! GPT-2 byte-level BPE tokenizer.
//!
//! Text is pre-split with the GPT-2 regex, each chunk's UTF-8 bytes are
//! mapped through the fixed byte-to-unicode table, and merge rules are
//! applied lowest-rank first until no ranked pair remains.

use std::collections::HashMap;
use std::path::Path;

use fancy_regex::Regex;

use crate::error::{Error, Result};

/// Id of `<|endoftext|>` in the GPT-2 vocabulary.
pub const END_OF_TEXT: u32 = 50256;

/// Vocabulary size of every GPT-2-family checkpoint.
pub const GPT2_VOCAB_SIZE: usize = 50257;

const PRE_TOKENIZE: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

const BUNDLED_VOCAB: &str = include_str!("../assets/gpt2/vocab.json");
const BUNDLED_MERGES: &str = include_str!("../assets/gpt2/merges.txt");

/// The printable-unicode stand-in for each byte value.
fn byte_encoder() -> [char; 256] {
    let mut direct: Vec<u32> = (u32::from(b'!')..=u32::from(b'~')).collect();
    direct.extend(0xA1..=0xAC);
    direct.extend(0xAE..=0xFF);
    let mut table = ['\0'; 256];
    let mut shifted = 0u32;
    for b in 0..256u32 {
        let c = if direct.contains(&b) {
            b
        } else {
            shifted += 1;
            255 + shifted
        };
        table[b as usize] = char::from_u32(c).expect("table entries are valid scalars");
    }
    table
}

/// Immutable GPT-2 vocabulary plus merge table.
pub struct BpeVocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    merge_ranks: HashMap<(String, String), usize>,
    byte_encoder: [char; 256],
    byte_decoder: HashMap<char, u8>,
    pattern: Regex,
}

impl std::fmt::Debug for BpeVocab {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BpeVocab")
            .field("vocab_size", &self.vocab_size())
            .field("merges", &self.merge_ranks.len())
            .finish()
    }
}

impl BpeVocab {
    /// Parses `vocab.json` and `merges.txt` contents.
    pub fn from_strs(vocab_json: &str, merges_txt: &str) -> Result<Self> {
        let token_to_id: HashMap<String, u32> = serde_json::from_str(vocab_json)
            .map_err(|e| Error::Invalid(format!("vocab.json: {e}")))?;
        let n = token_to_id.len();
        let mut id_to_token: Vec<Option<String>> = vec![None; n];
        for (tok, &id) in &token_to_id {
            let slot = id_to_token.get_mut(id as usize).ok_or_else(|| {
                Error::Invalid(format!("vocab.json: id {id} of {tok:?} outside [0, {n})"))
            })?;
            if let Some(prev) = slot.replace(tok.clone()) {
                return Err(Error::Invalid(format!(
                    "vocab.json: id {id} assigned to both {prev:?} and {tok:?}"
                )));
            }
        }
        // `n` distinct keys landing in `n` slots without collision fills every slot.
        let id_to_token: Vec<String> = id_to_token.into_iter().map(Option::unwrap).collect();

        let mut merge_ranks = HashMap::new();
        for (lineno, line) in merges_txt.lines().enumerate() {
            if (lineno == 0 && line.starts_with("#version")) || line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    let rank = merge_ranks.len();
                    merge_ranks.entry((a.to_owned(), b.to_owned())).or_insert(rank);
                }
                _ => {
                    return Err(Error::Parse {
                        line: lineno + 1,
                        msg: format!("merges.txt: expected two symbols, got {line:?}"),
                    })
                }
            }
        }

        let byte_encoder = byte_encoder();
        let byte_decoder = byte_encoder
            .iter()
            .enumerate()
            .map(|(b, &c)| (c, b as u8))
            .collect();
        Ok(BpeVocab {
            token_to_id,
            id_to_token,
            merge_ranks,
            byte_encoder,
            byte_decoder,
            pattern: Regex::new(PRE_TOKENIZE).expect("pre-tokenizer pattern compiles"),
        })
    }

    /// Loads `vocab.json` and `merges.txt` from disk.
    pub fn load(vocab_path: &Path, merges_path: &Path) -> Result<Self> {
        let vocab = std::fs::read_to_string(vocab_path).map_err(|e| Error::io(vocab_path, e))?;
        let merges = std::fs::read_to_string(merges_path).map_err(|e| Error::io(merges_path, e))?;
        Self::from_strs(&vocab, &merges)
    }

    /// Loads `vocab.json` and `merges.txt` from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        Self::load(&dir.join("vocab.json"), &dir.join("merges.txt"))
    }

    /// The standard GPT-2 vocabulary compiled into the crate.
    pub fn gpt2() -> Self {
        Self::from_strs(BUNDLED_VOCAB, BUNDLED_MERGES).expect("bundled GPT-2 vocabulary is valid")
    }

    pub fn vocab_size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    fn bpe(&self, word: &str) -> Vec<String> {
        let mut symbols: Vec<String> = word.chars().map(String::from).collect();
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .filter_map(|w| {
                    self.merge_ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&r| (r, (w[0].clone(), w[1].clone())))
                })
                .min_by_key(|(r, _)| *r);
            let Some((_, (first, second))) = best else {
                break;
            };
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == first && symbols[i + 1] == second {
                    merged.push(format!("{first}{second}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            symbols = merged;
        }
        symbols
    }

    /// Encodes text into token ids. Every string is encodable.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for m in self.pattern.find_iter(text) {
            let chunk = m.expect("pre-tokenizer never exceeds backtrack limits").as_str();
            let mapped: String = chunk.bytes().map(|b| self.byte_encoder[b as usize]).collect();
            for sym in self.bpe(&mapped) {
                let id = self.token_to_id.get(&sym).copied().unwrap_or_else(|| {
                    panic!("merge produced {sym:?}, which is missing from the vocabulary")
                });
                ids.push(id);
            }
        }
        ids
    }

    /// Decodes ids back into text; invalid UTF-8 is replaced with U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            let tok = self.id_to_token.get(id as usize).ok_or_else(|| {
                Error::Domain(format!(
                    "token id {id} is outside the vocabulary [0, {})",
                    self.vocab_size()
                ))
            })?;
            for c in tok.chars() {
                match self.byte_decoder.get(&c) {
                    Some(&b) => bytes.push(b),
                    None => {
                        let mut buf = [0u8; 4];
                        bytes.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
                    }
                }
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::OnceLock;

    fn vocab() -> &'static BpeVocab {
        static V: OnceLock<BpeVocab> = OnceLock::new();
        V.get_or_init(BpeVocab::gpt2)
    }

    #[test]
    fn byte_table_is_a_bijection() {
        let t = byte_encoder();
        let set: std::collections::HashSet<char> = t.iter().copied().collect();
        assert_eq!(set.len(), 256);
        assert_eq!(t[b'A' as usize], 'A');
        assert_eq!(t[b' ' as usize], 'Ġ');
        assert_eq!(t[b'\n' as usize], 'Ċ');
    }

    #[test]
    fn bundled_vocab_shape() {
        let v = vocab();
        assert_eq!(v.vocab_size(), GPT2_VOCAB_SIZE);
        assert_eq!(v.token_id("<|endoftext|>"), Some(END_OF_TEXT));
        assert_eq!(v.merge_ranks.len(), 50_000);
    }

    #[test]
    fn empty_round_trip() {
        assert!(vocab().encode("").is_empty());
        assert_eq!(vocab().decode(&[]).unwrap(), "");
    }

    #[test]
    fn hello_world() {
        assert_eq!(vocab().encode("Hello world"), vec![15496, 995]);
    }

    #[test]
    fn exemplar_round_trip() {
        let s = "The engineer solved the problem efficiently";
        assert_eq!(vocab().decode(&vocab().encode(s)).unwrap(), s);
    }

    #[test]
    fn out_of_range_id_is_named() {
        let err = vocab().decode(&[50257]).unwrap_err();
        assert!(err.to_string().contains("50257"));
    }

    #[test]
    fn partial_utf8_is_replaced() {
        // ' �' — a lone byte of a multi-byte sequence
        let s = vocab().decode(&[30325]).unwrap();
        assert!(s.contains('\u{FFFD}'));
    }

    #[test]
    fn rejects_inconsistent_vocab() {
        assert!(BpeVocab::from_strs(r#"{"a": 0, "b": 0}"#, "#version: 0.2\n").is_err());
        assert!(BpeVocab::from_strs(r#"{"a": 0, "b": 5}"#, "").is_err());
        assert!(matches!(
            BpeVocab::from_strs(r#"{"a": 0}"#, "#version: 0.2\na b c\n"),
            Err(Error::Parse { line: 2, .. })
        ));
    }
}
