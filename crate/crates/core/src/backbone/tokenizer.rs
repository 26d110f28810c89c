//! Byte-pair-encoding tokenizer compatible with vocab.json + merges.txt
//! files as distributed for contrastive vision-language checkpoints.

use std::collections::HashMap;
use std::path::Path;

use regex::Regex;

use crate::error::{Error, Result};

pub const START_TOKEN: &str = "<|startoftext|>";
pub const END_TOKEN: &str = "<|endoftext|>";

pub struct BpeTokenizer {
    encoder: HashMap<String, u32>,
    ranks: HashMap<(String, String), usize>,
    byte_encoder: Vec<char>,
    pattern: Regex,
}

/// GPT-2 style printable remapping of raw bytes.
fn bytes_to_unicode() -> Vec<char> {
    let mut bs: Vec<u16> = (b'!'..=b'~').map(u16::from).collect();
    bs.extend(0xa1..=0xac_u16);
    bs.extend(0xae..=0xff_u16);
    let mut table = vec![None::<char>; 256];
    for &b in &bs {
        table[b as usize] = char::from_u32(b as u32);
    }
    let mut n = 0u32;
    for (b, slot) in table.iter_mut().enumerate() {
        if slot.is_none() {
            *slot = char::from_u32(256 + n);
            n += 1;
        }
        let _ = b;
    }
    table.into_iter().map(|c| c.unwrap()).collect()
}

impl BpeTokenizer {
    pub fn from_files(vocab: &Path, merges: &Path) -> Result<Self> {
        let vocab_text = std::fs::read_to_string(vocab).map_err(|e| Error::Resolution {
            path: vocab.to_path_buf(),
            reason: e.to_string(),
        })?;
        let encoder: HashMap<String, u32> = serde_json::from_str(&vocab_text)?;
        let merges_text = std::fs::read_to_string(merges).map_err(|e| Error::Resolution {
            path: merges.to_path_buf(),
            reason: e.to_string(),
        })?;
        let merge_pairs = merges_text
            .lines()
            .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
            .map(|l| {
                let mut parts = l.split_whitespace();
                match (parts.next(), parts.next()) {
                    (Some(a), Some(b)) => Ok((a.to_string(), b.to_string())),
                    _ => Err(Error::data(format!("malformed merges line: {l:?}"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(encoder, merge_pairs)
    }

    pub fn new(encoder: HashMap<String, u32>, merges: Vec<(String, String)>) -> Result<Self> {
        for special in [START_TOKEN, END_TOKEN] {
            if !encoder.contains_key(special) {
                return Err(Error::config(format!(
                    "tokenizer vocabulary is missing the {special} token"
                )));
            }
        }
        let ranks = merges
            .into_iter()
            .enumerate()
            .map(|(i, pair)| (pair, i))
            .collect();
        let pattern = Regex::new(
            r"(?i)<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|\p{L}+|\p{N}|[^\s\p{L}\p{N}]+",
        )
        .expect("valid token pattern");
        Ok(BpeTokenizer {
            encoder,
            ranks,
            byte_encoder: bytes_to_unicode(),
            pattern,
        })
    }

    pub fn start_id(&self) -> u32 {
        self.encoder[START_TOKEN]
    }

    pub fn end_id(&self) -> u32 {
        self.encoder[END_TOKEN]
    }

    fn bpe(&self, token: &str) -> Vec<String> {
        let mut word: Vec<String> = token.chars().map(|c| c.to_string()).collect();
        if let Some(last) = word.last_mut() {
            last.push_str("</w>");
        } else {
            return Vec::new();
        }
        loop {
            let mut best: Option<((String, String), usize)> = None;
            for pair in word.windows(2) {
                let key = (pair[0].clone(), pair[1].clone());
                if let Some(&rank) = self.ranks.get(&key) {
                    if best.as_ref().map_or(true, |(_, r)| rank < *r) {
                        best = Some((key, rank));
                    }
                }
            }
            let Some(((first, second), _)) = best else {
                break;
            };
            let mut merged = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && word[i] == first && word[i + 1] == second {
                    merged.push(format!("{first}{second}"));
                    i += 2;
                } else {
                    merged.push(word[i].clone());
                    i += 1;
                }
            }
            word = merged;
            if word.len() == 1 {
                break;
            }
        }
        word
    }

    /// Encode text into token ids, without start/end markers.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let cleaned = text.split_whitespace().collect::<Vec<_>>().join(" ");
        let lowered = cleaned.to_lowercase();
        let mut ids = Vec::new();
        for m in self.pattern.find_iter(&lowered) {
            if m.as_str() == START_TOKEN || m.as_str() == END_TOKEN {
                ids.push(self.encoder[m.as_str()]);
                continue;
            }
            let encoded: String = m
                .as_str()
                .bytes()
                .map(|b| self.byte_encoder[b as usize])
                .collect();
            for piece in self.bpe(&encoded) {
                match self.encoder.get(&piece) {
                    Some(&id) => ids.push(id),
                    None => {
                        return Err(Error::config(format!(
                            "token {text:?} is not representable: piece {piece:?} missing from vocabulary"
                        )))
                    }
                }
            }
        }
        if ids.is_empty() {
            return Err(Error::config(format!("token {text:?} encodes to nothing")));
        }
        Ok(ids)
    }
}
