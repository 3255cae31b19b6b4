// SPDX-License-Identifier: MIT OR Apache-2.0

//! Byte-level BPE compatible with GPT-2's `vocab.json` / `merges.txt`.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use fancy_regex::Regex;

use crate::error::{Error, Result};

pub const VOCAB_FILE: &str = "vocab.json";
pub const MERGES_FILE: &str = "merges.txt";
pub const END_OF_TEXT: &str = "<|endoftext|>";

const GPT2_PATTERN: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

static GPT2_VOCAB: &str = include_str!("../assets/gpt2/vocab.json");
static GPT2_MERGES: &str = include_str!("../assets/gpt2/merges.txt");

/// GPT-2's reversible byte -> printable-char table.
fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut extra = 0u32;
    for b in 0u32..256 {
        let ch = if (b'!' as u32..=b'~' as u32).contains(&b)
            || (0xA1..=0xAC).contains(&b)
            || (0xAE..=0xFF).contains(&b)
        {
            b
        } else {
            extra += 1;
            255 + extra
        };
        table[b as usize] = char::from_u32(ch).expect("valid char");
    }
    table
}

/// Byte-level BPE tokenizer. Immutable once built.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    encoder: HashMap<String, u32>,
    decoder: Vec<String>,
    ranks: HashMap<(String, String), u32>,
    merges: Vec<(String, String)>,
    byte_encoder: [char; 256],
    byte_decoder: HashMap<char, u8>,
    pattern: Regex,
}

impl Tokenizer {
    /// The GPT-2 vocabulary shipped with the crate.
    pub fn gpt2() -> Self {
        Self::from_strs(GPT2_VOCAB, GPT2_MERGES).expect("bundled GPT-2 vocabulary is valid")
    }

    pub fn from_files(vocab: &Path, merges: &Path) -> Result<Self> {
        let v = std::fs::read_to_string(vocab).map_err(|e| Error::io(vocab, e))?;
        let m = std::fs::read_to_string(merges).map_err(|e| Error::io(merges, e))?;
        Self::from_strs(&v, &m)
    }

    pub fn from_dir(dir: &Path) -> Result<Self> {
        Self::from_files(&dir.join(VOCAB_FILE), &dir.join(MERGES_FILE))
    }

    pub fn from_strs(vocab_json: &str, merges_txt: &str) -> Result<Self> {
        let encoder: HashMap<String, u32> =
            serde_json::from_str(vocab_json).map_err(|e| Error::Tokenizer(format!("vocab.json: {e}")))?;
        let merges = merges_txt
            .lines()
            .enumerate()
            .filter(|(i, l)| !(*i == 0 && l.starts_with("#version")) && !l.trim().is_empty())
            .map(|(i, l)| {
                l.split_once(' ')
                    .map(|(a, b)| (a.to_string(), b.to_string()))
                    .ok_or_else(|| Error::Tokenizer(format!("merges.txt line {}: expected a pair", i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(encoder, merges)
    }

    fn from_parts(encoder: HashMap<String, u32>, merges: Vec<(String, String)>) -> Result<Self> {
        let n = encoder.len();
        let mut decoder = vec![None::<String>; n];
        for (tok, &id) in &encoder {
            let slot = decoder
                .get_mut(id as usize)
                .ok_or_else(|| Error::Tokenizer(format!("id {id} of `{tok}` is not dense")))?;
            if slot.replace(tok.clone()).is_some() {
                return Err(Error::Tokenizer(format!("id {id} assigned twice")));
            }
        }
        let decoder: Vec<String> = decoder.into_iter().map(|t| t.expect("dense ids")).collect();
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, pair) in merges.iter().enumerate() {
            if ranks.insert(pair.clone(), rank as u32).is_some() {
                return Err(Error::Tokenizer(format!("duplicate merge {} {}", pair.0, pair.1)));
            }
        }
        let byte_encoder = bytes_to_unicode();
        let byte_decoder = byte_encoder.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        Ok(Tokenizer {
            encoder,
            decoder,
            ranks,
            merges,
            byte_encoder,
            byte_decoder,
            pattern: Regex::new(GPT2_PATTERN).expect("static pattern"),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.decoder.len()
    }

    pub fn end_of_text(&self) -> Option<u32> {
        self.encoder.get(END_OF_TEXT).copied()
    }

    /// Pre-tokenized pieces of `text`, in byte-encoded form.
    fn pieces<'t>(&'t self, text: &'t str) -> impl Iterator<Item = String> + 't {
        self.pattern.find_iter(text).map(move |m| {
            let m = m.expect("regex backtrack limit");
            m.as_str().bytes().map(|b| self.byte_encoder[b as usize]).collect()
        })
    }

    fn bpe(&self, piece: &str) -> Vec<String> {
        let mut symbols: Vec<String> = piece.chars().map(|c| c.to_string()).collect();
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, i)))
                .min();
            let Some((rank, _)) = best else { break };
            let (a, b) = &self.merges[rank as usize];
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && &symbols[i] == a && &symbols[i + 1] == b {
                    merged.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    merged.push(symbols[i].clone());
                    i += 1;
                }
            }
            symbols = merged;
        }
        symbols
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for piece in self.pieces(text) {
            for sym in self.bpe(&piece) {
                let id = self
                    .encoder
                    .get(&sym)
                    .copied()
                    .unwrap_or_else(|| panic!("BPE produced `{sym}` which is not in the vocabulary"));
                ids.push(id);
            }
        }
        ids
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            let tok = self.decoder.get(id as usize).ok_or(Error::TokenOutOfRange {
                id,
                vocab_size: self.decoder.len(),
            })?;
            for c in tok.chars() {
                let b = self
                    .byte_decoder
                    .get(&c)
                    .ok_or_else(|| Error::Tokenizer(format!("token {id} holds unmapped char {c:?}")))?;
                bytes.push(*b);
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    pub fn token_str(&self, id: u32) -> Option<&str> {
        self.decoder.get(id as usize).map(String::as_str)
    }

    /// Id of an answer word, space-prefixed; `None` when it is not a
    /// single token.
    pub fn single_token(&self, answer: &str) -> Option<u32> {
        match self.encode(&space_prefixed(answer))[..] {
            [id] => Some(id),
            _ => None,
        }
    }

    /// First token of a space-prefixed answer.
    pub fn answer_token(&self, answer: &str) -> Result<u32> {
        self.encode(&space_prefixed(answer))
            .first()
            .copied()
            .ok_or_else(|| Error::Tokenizer("empty answer".into()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ordered: serde_json::Map<String, serde_json::Value> = self
            .decoder
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), serde_json::Value::from(i)))
            .collect();
        let vocab_path = dir.join(VOCAB_FILE);
        std::fs::write(&vocab_path, serde_json::to_string(&ordered)?).map_err(|e| Error::io(&vocab_path, e))?;
        let mut merges = String::from("#version: 0.2\n");
        for (a, b) in &self.merges {
            merges.push_str(a);
            merges.push(' ');
            merges.push_str(b);
            merges.push('\n');
        }
        let merges_path = dir.join(MERGES_FILE);
        std::fs::write(&merges_path, merges).map_err(|e| Error::io(&merges_path, e))
    }

    /// A small byte-level vocabulary in which every pre-tokenized piece of
    /// `corpus` is a single token. Ids 0..256 are the raw bytes; the
    /// end-of-text token is last.
    pub fn for_corpus<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let byte_encoder = bytes_to_unicode();
        let mut encoder: HashMap<String, u32> = byte_encoder
            .iter()
            .enumerate()
            .map(|(b, c)| (c.to_string(), b as u32))
            .collect();
        let mut tok = Tokenizer::from_parts(encoder.clone(), Vec::new()).expect("byte vocabulary");
        let pieces: BTreeSet<String> = corpus.into_iter().flat_map(|t| tok.pieces(t).collect::<Vec<_>>()).collect();
        for piece in pieces {
            loop {
                let syms = tok.bpe(&piece);
                if syms.len() == 1 {
                    break;
                }
                let pair = (syms[0].clone(), syms[1].clone());
                let merged = format!("{}{}", pair.0, pair.1);
                let next = encoder.len() as u32;
                encoder.entry(merged).or_insert(next);
                tok.ranks.insert(pair.clone(), tok.merges.len() as u32);
                tok.merges.push(pair);
            }
        }
        let next = encoder.len() as u32;
        encoder.insert(END_OF_TEXT.to_string(), next);
        Tokenizer::from_parts(encoder, tok.merges).expect("consistent toy vocabulary")
    }
}

fn space_prefixed(s: &str) -> String {
    if s.starts_with(' ') {
        s.to_string()
    } else {
        format!(" {s}")
    }
}
