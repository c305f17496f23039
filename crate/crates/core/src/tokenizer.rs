//! Subword tokenizer: byte-pair-encoding over a character base alphabet,
//! with word-boundary tracking for word-level perplexity estimation.
//!
//! Text is treated as whitespace-delimited words. Pieces never contain
//! whitespace; instead each piece carries a word-end flag (persisted with a
//! `</w>` suffix), so `decode` can restore single spaces from token ids
//! alone. Round trips are exact for whitespace-normalized text.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use thiserror::Error;

pub const PAD: &str = "<PAD>";
pub const BOS: &str = "<BOS>";
pub const EOS: &str = "<EOS>";
pub const SEP: &str = "<SEP>";
const WORD_END_SUFFIX: &str = "</w>";

// Specials always occupy the first four ids, in this order.
pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot train on an empty corpus")]
    EmptyCorpus,
    #[error("target vocab size {target} cannot fit {alphabet} base symbols plus {specials} specials")]
    VocabTooSmall {
        target: usize,
        alphabet: usize,
        specials: usize,
    },
    #[error("corpus exhausted after {found} merges; {wanted} needed for the target vocab size")]
    NotEnoughPairs { found: usize, wanted: usize },
    #[error("character {0:?} is not in the tokenizer alphabet")]
    UnknownCharacter(char),
    #[error("token id {0} is not in the vocabulary")]
    UnknownId(u32),
    #[error("failed to read vocab file: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse vocab file: {0}")]
    Parse(#[from] serde_json::Error),
}

/// A vocabulary entry: surface string plus whether it closes a word.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Piece {
    pub surface: String,
    pub ends_word: bool,
}

impl Piece {
    fn key(&self) -> String {
        if self.ends_word {
            format!("{}{}", self.surface, WORD_END_SUFFIX)
        } else {
            self.surface.clone()
        }
    }

    fn from_key(key: &str) -> Piece {
        match key.strip_suffix(WORD_END_SUFFIX) {
            Some(s) => Piece {
                surface: s.to_string(),
                ends_word: true,
            },
            None => Piece {
                surface: key.to_string(),
                ends_word: false,
            },
        }
    }
}

impl fmt::Display for Piece {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.key())
    }
}

/// Ids for the reserved control tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub pad: u32,
    pub bos: u32,
    pub eos: u32,
    pub sep: u32,
}

/// Trained vocabulary: pieces, ordered merge rules, special ids.
#[derive(Debug, Clone)]
pub struct Vocab {
    id_to_piece: Vec<Piece>,
    piece_to_id: HashMap<Piece, u32>,
    merges: Vec<(String, String)>,
    specials: SpecialIds,
    /// Base (pre-merge) vocabulary prefix length: specials + alphabet.
    n_base: usize,
}

/// Token ids plus word-start flags, one per token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoding {
    pub token_ids: Vec<u32>,
    pub word_starts: Vec<bool>,
}

impl Encoding {
    pub fn empty() -> Self {
        Encoding {
            token_ids: Vec::new(),
            word_starts: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    pieces: Vec<String>,
    merges: Vec<(String, String)>,
    specials: SpecialIds,
    n_base: usize,
}

impl Vocab {
    /// Train a BPE vocabulary of exactly `target_vocab_size` entries:
    /// 4 specials, then the observed base symbols, then merge outputs
    /// ordered by descending pair frequency (ties broken lexicographically).
    pub fn train<'a, I>(corpus: I, target_vocab_size: usize) -> Result<Vocab, TokenizerError>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let special_surfaces = [PAD, BOS, EOS, SEP];

        // Words as symbol sequences with a word-end flag on the last symbol.
        let mut word_counts: HashMap<Vec<Piece>, u64> = HashMap::new();
        for line in corpus {
            for word in line.split_whitespace() {
                if special_surfaces.contains(&word) {
                    continue; // reserved atoms, never re-learned
                }
                let chars: Vec<char> = word.chars().collect();
                let symbols: Vec<Piece> = chars
                    .iter()
                    .enumerate()
                    .map(|(i, c)| Piece {
                        surface: c.to_string(),
                        ends_word: i + 1 == chars.len(),
                    })
                    .collect();
                *word_counts.entry(symbols).or_insert(0) += 1;
            }
        }
        if word_counts.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }

        // Deterministic base alphabet order.
        let mut alphabet: Vec<Piece> = word_counts
            .keys()
            .flat_map(|w| w.iter().cloned())
            .collect::<std::collections::HashSet<_>>()
            .into_iter()
            .collect();
        alphabet.sort_by_key(|p| (p.surface.clone(), p.ends_word));

        let n_specials = special_surfaces.len();
        let n_base = n_specials + alphabet.len();
        if target_vocab_size < n_base {
            return Err(TokenizerError::VocabTooSmall {
                target: target_vocab_size,
                alphabet: alphabet.len(),
                specials: n_specials,
            });
        }
        let n_merges = target_vocab_size - n_base;

        // Deterministic word order for pair counting.
        let mut words: Vec<(Vec<Piece>, u64)> = word_counts.into_iter().collect();
        words.sort_by(|a, b| {
            let ka: Vec<String> = a.0.iter().map(|p| p.key()).collect();
            let kb: Vec<String> = b.0.iter().map(|p| p.key()).collect();
            ka.cmp(&kb)
        });

        let mut merges: Vec<(String, String)> = Vec::with_capacity(n_merges);
        let mut merged_pieces: Vec<Piece> = Vec::with_capacity(n_merges);

        for round in 0..n_merges {
            let mut pair_counts: HashMap<(Piece, Piece), u64> = HashMap::new();
            for (word, count) in &words {
                for pair in word.windows(2) {
                    *pair_counts
                        .entry((pair[0].clone(), pair[1].clone()))
                        .or_insert(0) += count;
                }
            }
            let best = pair_counts.into_iter().max_by(|a, b| {
                a.1.cmp(&b.1).then_with(|| {
                    // lexicographically smallest pair wins ties
                    (b.0 .0.key(), b.0 .1.key()).cmp(&(a.0 .0.key(), a.0 .1.key()))
                })
            });
            let ((left, right), _) = match best {
                Some(p) => p,
                None => {
                    return Err(TokenizerError::NotEnoughPairs {
                        found: round,
                        wanted: n_merges,
                    })
                }
            };
            let merged = Piece {
                surface: format!("{}{}", left.surface, right.surface),
                ends_word: right.ends_word,
            };
            for (word, _) in words.iter_mut() {
                apply_merge(word, &left, &right, &merged);
            }
            merges.push((left.key(), right.key()));
            merged_pieces.push(merged);
        }

        let mut id_to_piece: Vec<Piece> = special_surfaces
            .iter()
            .map(|s| Piece {
                surface: s.to_string(),
                ends_word: true,
            })
            .collect();
        id_to_piece.extend(alphabet);
        id_to_piece.extend(merged_pieces);

        let piece_to_id = id_to_piece
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i as u32))
            .collect();

        Ok(Vocab {
            id_to_piece,
            piece_to_id,
            merges,
            specials: SpecialIds {
                pad: 0,
                bos: 1,
                eos: 2,
                sep: 3,
            },
            n_base,
        })
    }

    pub fn size(&self) -> usize {
        self.id_to_piece.len()
    }

    pub fn specials(&self) -> SpecialIds {
        self.specials
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn piece(&self, id: u32) -> Option<&Piece> {
        self.id_to_piece.get(id as usize)
    }

    fn is_special(&self, id: u32) -> bool {
        id == self.specials.pad
            || id == self.specials.bos
            || id == self.specials.eos
            || id == self.specials.sep
    }

    fn special_id_for(&self, word: &str) -> Option<u32> {
        match word {
            PAD => Some(self.specials.pad),
            BOS => Some(self.specials.bos),
            EOS => Some(self.specials.eos),
            SEP => Some(self.specials.sep),
            _ => None,
        }
    }

    /// Encode whitespace-delimited words; `word_starts[i]` is true where
    /// token `i` begins a word. Whitespace runs are normalized away.
    pub fn encode(&self, text: &str) -> Result<Encoding, TokenizerError> {
        let mut enc = Encoding::empty();
        for word in text.split_whitespace() {
            if let Some(id) = self.special_id_for(word) {
                enc.token_ids.push(id);
                enc.word_starts.push(true);
                continue;
            }
            let ids = self.encode_word(word)?;
            for (i, id) in ids.into_iter().enumerate() {
                enc.token_ids.push(id);
                enc.word_starts.push(i == 0);
            }
        }
        Ok(enc)
    }

    fn encode_word(&self, word: &str) -> Result<Vec<u32>, TokenizerError> {
        let chars: Vec<char> = word.chars().collect();
        let mut symbols: Vec<Piece> = chars
            .iter()
            .enumerate()
            .map(|(i, c)| Piece {
                surface: c.to_string(),
                ends_word: i + 1 == chars.len(),
            })
            .collect();
        for p in &symbols {
            if !self.piece_to_id.contains_key(p) {
                return Err(TokenizerError::UnknownCharacter(
                    p.surface.chars().next().unwrap(),
                ));
            }
        }
        // Merges applied in rule order, each everywhere it matches.
        for (left_key, right_key) in &self.merges {
            let left = Piece::from_key(left_key);
            let right = Piece::from_key(right_key);
            let merged = Piece {
                surface: format!("{}{}", left.surface, right.surface),
                ends_word: right.ends_word,
            };
            apply_merge(&mut symbols, &left, &right, &merged);
        }
        Ok(symbols
            .into_iter()
            .map(|p| self.piece_to_id[&p])
            .collect())
    }

    /// Inverse of `encode` on its image: concatenates pieces, emitting a
    /// single space after each word-final piece.
    pub fn decode(&self, token_ids: &[u32]) -> Result<String, TokenizerError> {
        let mut out = String::new();
        for &id in token_ids {
            let piece = self
                .piece(id)
                .ok_or(TokenizerError::UnknownId(id))?;
            out.push_str(&piece.surface);
            if piece.ends_word {
                out.push(' ');
            }
        }
        if out.ends_with(' ') {
            out.pop();
        }
        Ok(out)
    }

    /// Ids of non-special tokens for `text`, convenience over `encode`.
    pub fn encode_ids(&self, text: &str) -> Result<Vec<u32>, TokenizerError> {
        Ok(self.encode(text)?.token_ids)
    }

    /// Specials persist by bare surface; ordinary pieces carry the
    /// word-end suffix so the file is self-describing.
    fn persisted(&self) -> VocabFile {
        let pieces = self
            .id_to_piece
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if self.is_special(i as u32) {
                    p.surface.clone()
                } else {
                    p.key()
                }
            })
            .collect();
        VocabFile {
            pieces,
            merges: self.merges.clone(),
            specials: self.specials,
            n_base: self.n_base,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let json = serde_json::to_string_pretty(&self.persisted())?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab, TokenizerError> {
        let json = std::fs::read_to_string(path)?;
        let file: VocabFile = serde_json::from_str(&json)?;
        let id_to_piece: Vec<Piece> = file
            .pieces
            .iter()
            .enumerate()
            .map(|(i, key)| {
                if (i as u32) == file.specials.pad
                    || (i as u32) == file.specials.bos
                    || (i as u32) == file.specials.eos
                    || (i as u32) == file.specials.sep
                {
                    Piece {
                        surface: key.clone(),
                        ends_word: true,
                    }
                } else {
                    Piece::from_key(key)
                }
            })
            .collect();
        let piece_to_id = id_to_piece
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i as u32))
            .collect();
        Ok(Vocab {
            id_to_piece,
            piece_to_id,
            merges: file.merges,
            specials: file.specials,
            n_base: file.n_base,
        })
    }

    /// SHA-256 of the persisted form, used to tie checkpoints to the
    /// tokenizer they were trained with.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(&self.persisted()).expect("vocab serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn apply_merge(word: &mut Vec<Piece>, left: &Piece, right: &Piece, merged: &Piece) {
    if word.len() < 2 {
        return;
    }
    let mut out: Vec<Piece> = Vec::with_capacity(word.len());
    let mut i = 0;
    while i < word.len() {
        if i + 1 < word.len() && word[i] == *left && word[i + 1] == *right {
            out.push(merged.clone());
            i += 2;
        } else {
            out.push(word[i].clone());
            i += 1;
        }
    }
    *word = out;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn train(corpus: &[&str], size: usize) -> Vocab {
        Vocab::train(corpus.iter().copied(), size).unwrap()
    }

    /// Distinct base symbols in a corpus: (char, word-final?) pairs.
    fn alphabet_size(corpus: &[&str]) -> usize {
        let mut set = std::collections::HashSet::new();
        for line in corpus {
            for word in line.split_whitespace() {
                let chars: Vec<char> = word.chars().collect();
                for (i, c) in chars.iter().enumerate() {
                    set.insert((*c, i + 1 == chars.len()));
                }
            }
        }
        set.len()
    }

    fn train_merges(corpus: &[&str], n_merges: usize) -> Vocab {
        train(corpus, 4 + alphabet_size(corpus) + n_merges)
    }

    #[test]
    fn single_pair_corpus_merges_it_first() {
        // "aaaa": base symbols are a and a</w>, so alphabet = 2, specials = 4.
        let vocab = train(&["aaaa"], 4 + 2 + 1);
        assert_eq!(vocab.size(), 7);
        assert_eq!(vocab.merges(), &[("a".to_string(), "a".to_string())]);
    }

    #[test]
    fn frequency_beats_rarity() {
        // (a,b</w>) occurs 3 times, (a,c</w>) once.
        let vocab = train_merges(&["ab ab ab ac"], 1);
        assert_eq!(
            vocab.merges(),
            &[("a".to_string(), "b</w>".to_string())]
        );
    }

    #[test]
    fn undersized_target_is_rejected() {
        let err = Vocab::train(["abc"].into_iter(), 2).unwrap_err();
        assert!(matches!(err, TokenizerError::VocabTooSmall { .. }));
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let err = Vocab::train(["   "].into_iter(), 40).unwrap_err();
        assert!(matches!(err, TokenizerError::EmptyCorpus));
    }

    #[test]
    fn merge_exhaustion_is_reported() {
        let err = Vocab::train(["aaaa"].into_iter(), 4 + 2 + 10).unwrap_err();
        assert!(matches!(err, TokenizerError::NotEnoughPairs { .. }));
    }

    #[test]
    fn empty_text_encodes_to_empty() {
        let vocab = train(&["ab"], 4 + 2);
        let enc = vocab.encode("").unwrap();
        assert!(enc.is_empty());
    }

    #[test]
    fn merge_compresses_each_word_to_one_token() {
        let vocab = train(&["ab ab ab"], 4 + 2 + 1);
        let enc = vocab.encode("ab ab").unwrap();
        assert_eq!(enc.len(), 2);
        assert_eq!(enc.word_starts, vec![true, true]);
        assert_eq!(vocab.decode(&enc.token_ids).unwrap(), "ab ab");
    }

    #[test]
    fn decode_empty_and_single_symbol() {
        let vocab = train(&["ab"], 4 + 2);
        assert_eq!(vocab.decode(&[]).unwrap(), "");
        let a_id = vocab.encode("ab").unwrap().token_ids[0];
        let piece = vocab.piece(a_id).unwrap();
        assert_eq!(piece.surface, "a");
        assert_eq!(vocab.decode(&[a_id]).unwrap(), "a");
    }

    #[test]
    fn unknown_character_is_named() {
        let vocab = train(&["ab"], 4 + 2);
        let err = vocab.encode("az").unwrap_err();
        assert!(err.to_string().contains('z'), "{err}");
    }

    #[test]
    fn unknown_id_is_rejected() {
        let vocab = train(&["ab"], 4 + 2);
        assert!(matches!(
            vocab.decode(&[999]).unwrap_err(),
            TokenizerError::UnknownId(999)
        ));
    }

    #[test]
    fn specials_are_distinct_and_in_range() {
        let vocab = train(&["ab"], 4 + 2);
        let s = vocab.specials();
        let ids = [s.pad, s.bos, s.eos, s.sep];
        for (i, a) in ids.iter().enumerate() {
            assert!((*a as usize) < vocab.size());
            for b in ids.iter().skip(i + 1) {
                assert_ne!(a, b);
            }
        }
    }

    #[test]
    fn separator_surface_form_round_trips() {
        let vocab = train(&["ab cd"], 4 + 4);
        let enc = vocab.encode("ab <SEP> cd").unwrap();
        assert!(enc.token_ids.contains(&vocab.specials().sep));
        assert_eq!(vocab.decode(&enc.token_ids).unwrap(), "ab <SEP> cd");
    }

    #[test]
    fn token_count_never_exceeds_char_count() {
        let vocab = train_merges(&["the cat sat on the mat"], 6);
        for text in ["the cat", "mat on the cat", "t"] {
            let enc = vocab.encode(text).unwrap();
            assert!(enc.len() <= text.chars().count());
        }
    }

    #[test]
    fn word_starts_count_words() {
        let vocab = train_merges(&["the cat sat"], 2);
        let enc = vocab.encode("the cat sat the").unwrap();
        let starts = enc.word_starts.iter().filter(|b| **b).count();
        assert_eq!(starts, 4);
    }

    #[test]
    fn word_groups_reconstruct_normalized_text() {
        let vocab = train_merges(&["the cat sat on a mat"], 5);
        let text = "the   cat \n sat";
        let enc = vocab.encode(text).unwrap();
        // split tokens into word groups at word_starts
        let mut groups: Vec<Vec<u32>> = Vec::new();
        for (id, start) in enc.token_ids.iter().zip(&enc.word_starts) {
            if *start {
                groups.push(vec![*id]);
            } else {
                groups.last_mut().unwrap().push(*id);
            }
        }
        let joined = groups
            .iter()
            .map(|g| vocab.decode(g).unwrap())
            .collect::<Vec<_>>()
            .join(" ");
        assert_eq!(joined, "the cat sat");
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        let vocab = train_merges(&["the cat sat on the mat", "a cat ran"], 6);
        vocab.save(&path).unwrap();
        let loaded = Vocab::load(&path).unwrap();
        assert_eq!(vocab.content_hash(), loaded.content_hash());
        let enc_a = vocab.encode("the cat ran").unwrap();
        let enc_b = loaded.encode("the cat ran").unwrap();
        assert_eq!(enc_a, enc_b);
    }

    #[test]
    fn training_is_deterministic() {
        let a = train_merges(&["the cat sat on the mat", "a cat ran"], 5);
        let b = train_merges(&["the cat sat on the mat", "a cat ran"], 5);
        assert_eq!(a.content_hash(), b.content_hash());
    }
}
