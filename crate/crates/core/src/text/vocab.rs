// SPDX-License-Identifier: MIT OR Apache-2.0

//! Byte-level BPE vocabulary loaded from a `vocab.json` + `merges.txt` pair.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{PlanError, Result};
use crate::text::bytes::{byte_order, decode_string, encode_bytes};
use crate::text::pretokenize::pretokenize;

#[derive(Debug, Clone)]
pub struct Vocabulary {
    /// id -> token string as written in vocab.json
    strings: Vec<String>,
    /// id -> raw bytes
    bytes: Vec<Vec<u8>>,
    ids: HashMap<String, u32>,
    byte_ids: [u32; 256],
    merges: Vec<(String, String)>,
    merge_ranks: HashMap<(u32, u32), (usize, u32)>,
    newline_ids: BTreeSet<u32>,
    question_ids: BTreeSet<u32>,
    end_of_text: Option<u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from token strings (indexed by id) and ranked merges.
    pub fn new(strings: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(strings.len());
        let mut bytes = Vec::with_capacity(strings.len());
        for (id, s) in strings.iter().enumerate() {
            if ids.insert(s.clone(), id as u32).is_some() {
                return Err(PlanError::Tokenizer(format!("duplicate token string {s:?}")));
            }
            let b = decode_string(s)
                .ok_or_else(|| PlanError::Tokenizer(format!("token {s:?} is not in byte-level form")))?;
            bytes.push(b);
        }
        let mut byte_ids = [0u32; 256];
        for b in 0..=255u8 {
            let s = encode_bytes(&[b]);
            byte_ids[b as usize] = *ids
                .get(&s)
                .ok_or_else(|| PlanError::Tokenizer(format!("vocabulary lacks the single-byte token {s:?}")))?;
        }
        let mut merge_ranks = HashMap::with_capacity(merges.len());
        for (rank, (a, b)) in merges.iter().enumerate() {
            let lookup = |s: &str| {
                ids.get(s)
                    .copied()
                    .ok_or_else(|| PlanError::Tokenizer(format!("merge {rank} references unknown token {s:?}")))
            };
            let merged = lookup(&format!("{a}{b}"))?;
            merge_ranks.entry((lookup(a)?, lookup(b)?)).or_insert((rank, merged));
        }
        let newline_ids = (0..bytes.len() as u32)
            .filter(|&i| bytes[i as usize].contains(&b'\n'))
            .collect();
        let question_ids = (0..bytes.len() as u32)
            .filter(|&i| {
                let t = String::from_utf8_lossy(&bytes[i as usize]);
                t.trim_end().ends_with('?')
            })
            .collect();
        let end_of_text = ids.get("<|endoftext|>").copied();
        Ok(Self {
            strings,
            bytes,
            ids,
            byte_ids,
            merges,
            merge_ranks,
            newline_ids,
            question_ids,
            end_of_text,
        })
    }

    /// Reads the `vocab.json` (token string -> id) and `merges.txt` pair.
    pub fn from_files(vocab_json: impl AsRef<Path>, merges_txt: impl AsRef<Path>) -> Result<Self> {
        let map: HashMap<String, u32> = serde_json::from_str(&std::fs::read_to_string(vocab_json)?)
            .map_err(|e| PlanError::Tokenizer(format!("vocab.json: {e}")))?;
        let n = map.len();
        let mut strings = vec![None; n];
        for (s, id) in map {
            let slot = strings
                .get_mut(id as usize)
                .ok_or_else(|| PlanError::Tokenizer(format!("ids are not dense: {id} >= {n}")))?;
            *slot = Some(s);
        }
        let strings = strings
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| PlanError::Tokenizer("ids are not dense".into()))?;
        let mut merges = Vec::new();
        for (n, line) in std::fs::read_to_string(merges_txt)?.lines().enumerate() {
            if line.starts_with("#version") || line.is_empty() {
                continue;
            }
            let (a, b) = line
                .split_once(' ')
                .ok_or_else(|| PlanError::Tokenizer(format!("merges.txt line {}: expected two tokens", n + 1)))?;
            merges.push((a.to_string(), b.to_string()));
        }
        Self::new(strings, merges)
    }

    /// Loads `vocab.json` and `merges.txt` from one directory.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        Self::from_files(dir.join("vocab.json"), dir.join("merges.txt"))
    }

    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let map: serde_json::Map<String, serde_json::Value> = self
            .strings
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), serde_json::Value::from(i as u64)))
            .collect();
        std::fs::write(dir.join("vocab.json"), serde_json::to_string(&map)?)?;
        let mut merges = String::from("#version: 0.2\n");
        for (a, b) in &self.merges {
            merges.push_str(a);
            merges.push(' ');
            merges.push_str(b);
            merges.push('\n');
        }
        std::fs::write(dir.join("merges.txt"), merges)?;
        Ok(())
    }

    /// The 256 byte tokens plus one token for every word in `words`, built
    /// from left-to-right prefix merges.
    ///
    /// Words should start with a space so that every merge chain begins
    /// with the space byte; words that still fail to encode to one token
    /// are reported as an error.
    pub fn byte_level_with_words<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut strings: Vec<String> = byte_order().iter().map(|&b| encode_bytes(&[b])).collect();
        let mut known: std::collections::HashSet<String> = strings.iter().cloned().collect();
        let mut merges = Vec::new();
        for w in words {
            let units: Vec<String> = w.as_ref().bytes().map(|b| encode_bytes(&[b])).collect();
            let mut prefix = units.first().cloned().unwrap_or_default();
            for u in units.iter().skip(1) {
                let next = format!("{prefix}{u}");
                if known.insert(next.clone()) {
                    merges.push((prefix.clone(), u.clone()));
                    strings.push(next.clone());
                }
                prefix = next;
            }
        }
        let vocab = Self::new(strings, merges)?;
        for w in words {
            let ids = vocab.encode(w.as_ref());
            if ids.len() != 1 {
                return Err(PlanError::Tokenizer(format!(
                    "word {:?} does not encode to a single token",
                    w.as_ref()
                )));
            }
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.strings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strings.is_empty()
    }

    pub fn token_id(&self, token_string: &str) -> Option<u32> {
        self.ids.get(token_string).copied()
    }

    /// Id of the token whose raw text is `text`, if there is one.
    pub fn id_of_text(&self, text: &str) -> Option<u32> {
        self.token_id(&encode_bytes(text.as_bytes()))
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.bytes.get(id as usize).map(Vec::as_slice)
    }

    pub fn token_text(&self, id: u32) -> Option<String> {
        self.token_bytes(id).map(|b| String::from_utf8_lossy(b).into_owned())
    }

    pub fn newline_ids(&self) -> &BTreeSet<u32> {
        &self.newline_ids
    }

    pub fn question_ids(&self) -> &BTreeSet<u32> {
        &self.question_ids
    }

    pub fn end_of_text(&self) -> Option<u32> {
        self.end_of_text
    }

    pub fn is_newline(&self, id: u32) -> bool {
        self.newline_ids.contains(&id)
    }

    /// Byte-level BPE: pre-tokenize, then repeatedly merge the lowest-ranked
    /// adjacent pair (all its occurrences, left to right).
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for chunk in pretokenize(text) {
            let mut word: Vec<u32> = chunk.bytes().map(|b| self.byte_ids[b as usize]).collect();
            loop {
                let best = word
                    .windows(2)
                    .filter_map(|p| self.merge_ranks.get(&(p[0], p[1])).map(|&(r, m)| (r, p[0], p[1], m)))
                    .min_by_key(|&(r, ..)| r);
                let Some((_, a, b, merged)) = best else { break };
                let mut next = Vec::with_capacity(word.len());
                let mut i = 0;
                while i < word.len() {
                    if i + 1 < word.len() && word[i] == a && word[i + 1] == b {
                        next.push(merged);
                        i += 2;
                    } else {
                        next.push(word[i]);
                        i += 1;
                    }
                }
                word = next;
            }
            out.extend(word);
        }
        out
    }

    /// Concatenated token bytes, decoded as UTF-8 with lossy replacement.
    pub fn decode(&self, tokens: &[u32]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(tokens)?).into_owned())
    }

    pub fn decode_bytes(&self, tokens: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &t in tokens {
            let b = self.token_bytes(t).ok_or(PlanError::UnknownToken {
                id: t,
                vocab: self.len(),
            })?;
            out.extend_from_slice(b);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> Vocabulary {
        Vocabulary::byte_level_with_words(&[" light", " night", " des", " lake", " it"]).unwrap()
    }

    #[test]
    fn empty_text() {
        assert!(micro().encode("").is_empty());
        assert_eq!(micro().decode(&[]).unwrap(), "");
    }

    #[test]
    fn words_are_single_tokens() {
        let v = micro();
        assert_eq!(v.encode(" light").len(), 1);
        assert_eq!(v.encode(" lightning").len(), 1 + "ning".len());
        // no merges apply, so one token per byte
        assert_eq!(v.encode("A rhyming couplet:\n").len(), 19);
    }

    #[test]
    fn round_trip_template() {
        let v = micro();
        let s = "A rhyming couplet:\n";
        assert_eq!(v.decode(&v.encode(s)).unwrap(), s);
    }

    #[test]
    fn split_word_decodes_whole() {
        let v = Vocabulary::byte_level_with_words(&[" des", "pair"]).unwrap();
        let ids = v.encode(" despair");
        assert_eq!(ids.len(), 2);
        assert_eq!(v.token_text(ids[0]).unwrap(), " des");
        assert_eq!(v.token_text(ids[1]).unwrap(), "pair");
        assert_eq!(v.decode(&ids).unwrap(), " despair");
    }

    #[test]
    fn unknown_id_errors() {
        let v = micro();
        assert!(v.decode(&[v.len() as u32]).is_err());
    }

    #[test]
    fn newline_and_question_sets() {
        let v = micro();
        assert!(v.is_newline(v.id_of_text("\n").unwrap()));
        assert!(v.question_ids().contains(&v.id_of_text("?").unwrap()));
    }

    #[test]
    fn files_round_trip() {
        let v = micro();
        let dir = tempfile::tempdir().unwrap();
        v.write_dir(dir.path()).unwrap();
        let back = Vocabulary::from_dir(dir.path()).unwrap();
        let s = "The night sky, bright as a lake\n";
        assert_eq!(back.encode(s), v.encode(s));
        assert_eq!(back.len(), v.len());
    }

    #[test]
    fn merge_with_unknown_token_rejected() {
        let strings: Vec<String> = byte_order().iter().map(|&b| encode_bytes(&[b])).collect();
        let err = Vocabulary::new(strings, vec![("a".into(), "b".into())]).unwrap_err();
        assert!(err.to_string().contains("unknown token"));
    }
}
