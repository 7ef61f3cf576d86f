//! GPT-2 byte-level BPE.

mod locate;

use std::collections::HashMap;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use locate::{locate_candidate, CandidateSpans};

const SPLIT_PATTERN: &str = r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+";

/// Tokenized text with per-token byte spans into `text`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedPrompt {
    pub token_ids: Vec<u32>,
    /// `[start, end)` byte offsets of each token in `text`.
    pub offsets: Vec<(usize, usize)>,
    pub text: String,
}

impl TokenizedPrompt {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct BpeTokenizer {
    encoder: HashMap<String, u32>,
    decoder: HashMap<u32, String>,
    merge_ranks: HashMap<(String, String), usize>,
    byte_encoder: [char; 256],
    byte_decoder: HashMap<char, u8>,
    split: Regex,
    vocab_size: usize,
}

/// GPT-2's reversible byte → printable-char table.
fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut printable = [false; 256];
    for b in (b'!'..=b'~').chain(0xA1..=0xAC).chain(0xAE..=0xFF) {
        printable[b as usize] = true;
    }
    let mut extra = 0u32;
    for b in 0..256usize {
        table[b] = if printable[b] {
            char::from_u32(b as u32).unwrap()
        } else {
            extra += 1;
            char::from_u32(255 + extra).unwrap()
        };
    }
    table
}

/// Splits text into pre-tokens following the GPT-2 pattern, including its
/// `\s+(?!\S)` rule: a whitespace run followed by a word keeps its last
/// whitespace character for the next piece.
fn pre_tokenize(split: &Regex, text: &str) -> Vec<(usize, usize)> {
    let mut pieces = Vec::new();
    let mut pos = 0;
    while pos < text.len() {
        let m = split
            .find_at(text, pos)
            .expect("pattern matches every character");
        debug_assert_eq!(m.start(), pos);
        let mut end = m.end();
        let piece = m.as_str();
        if end < text.len() && piece.chars().all(char::is_whitespace) && piece.chars().count() > 1 {
            let last = piece.chars().next_back().unwrap();
            end -= last.len_utf8();
        }
        pieces.push((pos, end));
        pos = end;
    }
    pieces
}

impl BpeTokenizer {
    pub fn from_files(vocab_json: &Path, merges_txt: &Path) -> Result<Self> {
        let vocab = std::fs::read_to_string(vocab_json).map_err(|e| Error::io(vocab_json, e))?;
        let merges = std::fs::read_to_string(merges_txt).map_err(|e| Error::io(merges_txt, e))?;
        let encoder: HashMap<String, u32> = serde_json::from_str(&vocab)?;
        Self::from_parts(encoder, &parse_merges(&merges)?)
    }

    pub fn from_parts(encoder: HashMap<String, u32>, merges: &[(String, String)]) -> Result<Self> {
        if encoder.is_empty() {
            return Err(Error::Tokenizer("empty vocabulary".into()));
        }
        let byte_encoder = bytes_to_unicode();
        for c in byte_encoder {
            if !encoder.contains_key(&c.to_string()) {
                return Err(Error::Tokenizer(format!(
                    "vocabulary lacks byte symbol {c:?}; byte fallback impossible"
                )));
            }
        }
        let byte_decoder = byte_encoder.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        let decoder: HashMap<u32, String> = encoder.iter().map(|(k, &v)| (v, k.clone())).collect();
        if decoder.len() != encoder.len() {
            return Err(Error::Tokenizer("duplicate token ids in vocabulary".into()));
        }
        let vocab_size = *encoder.values().max().unwrap() as usize + 1;
        let merge_ranks = merges
            .iter()
            .enumerate()
            .map(|(rank, pair)| (pair.clone(), rank))
            .collect();
        Ok(BpeTokenizer {
            encoder,
            decoder,
            merge_ranks,
            byte_encoder,
            byte_decoder,
            split: Regex::new(SPLIT_PATTERN).expect("valid pattern"),
            vocab_size,
        })
    }

    /// Writes `vocab.json` and `merges.txt` in the GPT-2 file formats.
    pub fn write_files(&self, vocab_json: &Path, merges_txt: &Path) -> Result<()> {
        let vocab: std::collections::BTreeMap<&str, u32> =
            self.encoder.iter().map(|(k, &v)| (k.as_str(), v)).collect();
        let text = serde_json::to_string(&vocab)?;
        std::fs::write(vocab_json, text).map_err(|e| Error::io(vocab_json, e))?;
        let mut ranked: Vec<(&(String, String), &usize)> = self.merge_ranks.iter().collect();
        ranked.sort_by_key(|(_, &r)| r);
        let mut out = String::from("#version: 0.2\n");
        for ((a, b), _) in ranked {
            out.push_str(a);
            out.push(' ');
            out.push_str(b);
            out.push('\n');
        }
        std::fs::write(merges_txt, out).map_err(|e| Error::io(merges_txt, e))
    }

    /// Largest token id plus one.
    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.encoder.get(token).copied()
    }

    pub fn token_str(&self, id: u32) -> Option<&str> {
        self.decoder.get(&id).map(String::as_str)
    }

    fn bpe(&self, word: &str) -> Vec<String> {
        let mut symbols: Vec<String> = word.chars().map(String::from).collect();
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.merge_ranks.get(&(w[0].clone(), w[1].clone())))
                .min()
                .copied();
            let Some(rank) = best else { break };
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len()
                    && self.merge_ranks.get(&(symbols[i].clone(), symbols[i + 1].clone())) == Some(&rank)
                {
                    merged.push(format!("{}{}", symbols[i], symbols[i + 1]));
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

    pub fn encode(&self, text: &str) -> Result<TokenizedPrompt> {
        if text.is_empty() {
            return Err(Error::Tokenizer("cannot encode empty text".into()));
        }
        let mut token_ids = Vec::new();
        let mut offsets = Vec::new();
        for (start, end) in pre_tokenize(&self.split, text) {
            let mapped: String = text.as_bytes()[start..end]
                .iter()
                .map(|&b| self.byte_encoder[b as usize])
                .collect();
            let mut cursor = start;
            for piece in self.bpe(&mapped) {
                let n_bytes = piece.chars().count();
                match self.encoder.get(&piece) {
                    Some(&id) => {
                        token_ids.push(id);
                        offsets.push((cursor, cursor + n_bytes));
                    }
                    None => {
                        // Merge produced a symbol absent from the vocab: fall back to bytes.
                        for (k, ch) in piece.chars().enumerate() {
                            token_ids.push(self.encoder[&ch.to_string()]);
                            offsets.push((cursor + k, cursor + k + 1));
                        }
                    }
                }
                cursor += n_bytes;
            }
        }
        Ok(TokenizedPrompt {
            token_ids,
            offsets,
            text: text.to_string(),
        })
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let tok = self
                .decoder
                .get(&id)
                .ok_or_else(|| Error::Tokenizer(format!("unknown token id {id}")))?;
            for ch in tok.chars() {
                let b = self
                    .byte_decoder
                    .get(&ch)
                    .ok_or_else(|| Error::Tokenizer(format!("token {id} has non-byte symbol {ch:?}")))?;
                out.push(*b);
            }
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        String::from_utf8(self.decode_bytes(ids)?)
            .map_err(|_| Error::Tokenizer("decoded bytes are not valid UTF-8".into()))
    }

    /// Decodes with replacement characters for partial UTF-8 sequences.
    pub fn decode_lossy(&self, ids: &[u32]) -> String {
        let bytes: Vec<u8> = ids
            .iter()
            .filter_map(|id| self.decoder.get(id))
            .flat_map(|t| t.chars().filter_map(|c| self.byte_decoder.get(&c).copied()))
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    /// First token id of `word` in its mid-sentence (leading-space) form.
    pub fn first_token_id(&self, word: &str) -> Result<u32> {
        let enc = self.encode(&format!(" {word}"))?;
        Ok(enc.token_ids[0])
    }

    /// All token ids of `word` in its leading-space form.
    pub fn word_token_ids(&self, word: &str) -> Result<Vec<u32>> {
        Ok(self.encode(&format!(" {word}"))?.token_ids)
    }
}

fn parse_merges(text: &str) -> Result<Vec<(String, String)>> {
    let mut merges = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.starts_with("#version") || line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) => merges.push((a.to_string(), b.to_string())),
            _ => {
                return Err(Error::Tokenizer(format!("malformed merge on line {}: {line:?}", n + 1)));
            }
        }
    }
    Ok(merges)
}

/// Symbol for byte `b` in the GPT-2 byte alphabet.
pub fn byte_symbol(b: u8) -> char {
    bytes_to_unicode()[b as usize]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_table_is_bijective() {
        let t = bytes_to_unicode();
        let set: std::collections::HashSet<char> = t.iter().copied().collect();
        assert_eq!(set.len(), 256);
        assert_eq!(t[b' ' as usize], 'Ġ');
        assert_eq!(t[b'\n' as usize], 'Ċ');
        assert_eq!(t[b'A' as usize], 'A');
    }

    #[test]
    fn whitespace_lookahead_rule() {
        let re = Regex::new(SPLIT_PATTERN).unwrap();
        let text = "a   b\n\nc  ";
        let pieces: Vec<&str> = pre_tokenize(&re, text).iter().map(|&(s, e)| &text[s..e]).collect();
        assert_eq!(pieces, vec!["a", "  ", " b", "\n", "\n", "c", "  "]);
    }

    #[test]
    fn contractions_split() {
        let re = Regex::new(SPLIT_PATTERN).unwrap();
        let text = "it's can't";
        let pieces: Vec<&str> = pre_tokenize(&re, text).iter().map(|&(s, e)| &text[s..e]).collect();
        assert_eq!(pieces, vec!["it", "'s", " can", "'t"]);
    }

    #[test]
    fn merges_parse_skips_header() {
        let m = parse_merges("#version: 0.2\nĠ t\nh e\n").unwrap();
        assert_eq!(m, vec![("Ġ".into(), "t".into()), ("h".into(), "e".into())]);
        assert!(parse_merges("a b c\n").is_err());
    }
}
