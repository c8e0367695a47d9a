//! Byte-level BPE tokenizer with a fixed context window.
//!
//! Text is lowercased, split into UTF-8 bytes, and byte pairs are merged
//! according to a learned merge table. Every byte has a printable-character
//! stand-in so token strings serialize as plain UTF-8 JSON. Encoded rows
//! are always exactly `context_length` long: `[SOT, tokens…, EOT, PAD…]`,
//! with over-long text truncated to fit.

use std::collections::HashMap;
use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of base byte tokens.
const NUM_BYTES: usize = 256;
/// Base bytes plus SOT/EOT/PAD.
pub const MIN_VOCAB_SIZE: usize = NUM_BYTES + 3;
/// Default context window of the text tower.
pub const DEFAULT_CONTEXT_LENGTH: usize = 77;

const SOT_TOKEN: &str = "<|sot|>";
const EOT_TOKEN: &str = "<|eot|>";
const PAD_TOKEN: &str = "<|pad|>";

/// Printable stand-in characters for all 256 byte values.
///
/// Bytes that are already printable single-codepoint characters map to
/// themselves; the rest are remapped to codepoints 256 and up, in byte
/// order. The mapping is a bijection, so token strings are lossless.
fn byte_to_char_table() -> [char; NUM_BYTES] {
    let mut table = ['\0'; NUM_BYTES];
    let printable = |b: u8| -> bool {
        (b'!'..=b'~').contains(&b) || (0xa1..=0xac).contains(&b) || (0xae..=0xff).contains(&b)
    };
    let mut next = 256u32;
    for (b, slot) in table.iter_mut().enumerate() {
        let b = b as u8;
        if printable(b) {
            *slot = char::from_u32(b as u32).unwrap();
        } else {
            *slot = char::from_u32(next).unwrap();
            next += 1;
        }
    }
    table
}

fn char_to_byte_table() -> HashMap<char, u8> {
    byte_to_char_table()
        .iter()
        .enumerate()
        .map(|(b, &c)| (c, b as u8))
        .collect()
}

/// Byte-pair vocabulary: base byte tokens, special tokens, and an ordered
/// merge list. Immutable after construction; encode/decode are pure.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    token_to_id: HashMap<String, u32>,
    merges: Vec<(String, String)>,
    /// (left_id, right_id) -> (merge rank, merged id)
    merge_table: HashMap<(u32, u32), (usize, u32)>,
    sot_id: u32,
    eot_id: u32,
    pad_id: u32,
}

/// On-disk JSON form: `tokens` in id order, `merges` as `[left, right]`
/// token-string pairs, `specials` as the three reserved ids.
#[derive(Debug, Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    merges: Vec<(String, String)>,
    specials: SpecialIds,
}

#[derive(Debug, Serialize, Deserialize)]
struct SpecialIds {
    sot: u32,
    eot: u32,
    pad: u32,
}

impl Vocab {
    /// Base-byte vocabulary with specials and no merges.
    fn base() -> Self {
        let byte_chars = byte_to_char_table();
        let mut tokens: Vec<String> = byte_chars.iter().map(|c| c.to_string()).collect();
        let sot_id = tokens.len() as u32;
        tokens.push(SOT_TOKEN.to_string());
        let eot_id = tokens.len() as u32;
        tokens.push(EOT_TOKEN.to_string());
        let pad_id = tokens.len() as u32;
        tokens.push(PAD_TOKEN.to_string());
        let token_to_id = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab {
            tokens,
            token_to_id,
            merges: Vec::new(),
            merge_table: HashMap::new(),
            sot_id,
            eot_id,
            pad_id,
        }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn sot_id(&self) -> u32 {
        self.sot_id
    }

    pub fn eot_id(&self) -> u32 {
        self.eot_id
    }

    pub fn pad_id(&self) -> u32 {
        self.pad_id
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    fn push_merge(&mut self, left_id: u32, right_id: u32) -> u32 {
        let left = self.tokens[left_id as usize].clone();
        let right = self.tokens[right_id as usize].clone();
        let merged = format!("{left}{right}");
        let id = self.tokens.len() as u32;
        let rank = self.merges.len();
        self.tokens.push(merged.clone());
        self.token_to_id.insert(merged, id);
        self.merges.push((left, right));
        self.merge_table.insert((left_id, right_id), (rank, id));
        id
    }

    /// Serialize to the vocab file JSON. Field and element order are fixed,
    /// so identical vocabularies produce byte-identical files.
    pub fn to_json(&self) -> String {
        let file = VocabFile {
            tokens: self.tokens.clone(),
            merges: self.merges.clone(),
            specials: SpecialIds {
                sot: self.sot_id,
                eot: self.eot_id,
                pad: self.pad_id,
            },
        };
        serde_json::to_string(&file).expect("vocab serialization cannot fail")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(json)?;
        let n = file.tokens.len();
        if n < MIN_VOCAB_SIZE {
            return Err(Error::MalformedVocab(format!(
                "{n} tokens is below the {MIN_VOCAB_SIZE} minimum"
            )));
        }
        let token_to_id: HashMap<String, u32> = file
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        if token_to_id.len() != n {
            return Err(Error::MalformedVocab("duplicate token strings".into()));
        }
        for (i, &id) in [file.specials.sot, file.specials.eot, file.specials.pad]
            .iter()
            .enumerate()
        {
            if id as usize >= n {
                return Err(Error::MalformedVocab(format!(
                    "special id {id} (index {i}) out of range"
                )));
            }
        }
        if file.specials.sot == file.specials.eot
            || file.specials.eot == file.specials.pad
            || file.specials.sot == file.specials.pad
        {
            return Err(Error::MalformedVocab("special ids must be distinct".into()));
        }
        let mut merge_table = HashMap::new();
        for (rank, (left, right)) in file.merges.iter().enumerate() {
            let merged_id = (MIN_VOCAB_SIZE + rank) as u32;
            let (&lid, &rid) = match (token_to_id.get(left), token_to_id.get(right)) {
                (Some(l), Some(r)) => (l, r),
                _ => {
                    return Err(Error::MalformedVocab(format!(
                        "merge {rank} references unknown tokens {left:?}+{right:?}"
                    )))
                }
            };
            if lid >= merged_id || rid >= merged_id {
                return Err(Error::MalformedVocab(format!(
                    "merge {rank} references tokens not derivable from prior merges"
                )));
            }
            let merged = format!("{left}{right}");
            if file.tokens.get(merged_id as usize).map(String::as_str) != Some(merged.as_str()) {
                return Err(Error::MalformedVocab(format!(
                    "merge {rank} does not produce token id {merged_id}"
                )));
            }
            merge_table.insert((lid, rid), (rank, merged_id));
        }
        if n != MIN_VOCAB_SIZE + file.merges.len() {
            return Err(Error::MalformedVocab(format!(
                "token count {n} inconsistent with {} merges",
                file.merges.len()
            )));
        }
        Ok(Vocab {
            tokens: file.tokens,
            token_to_id,
            merges: file.merges,
            merge_table,
            sot_id: file.specials.sot,
            eot_id: file.specials.eot,
            pad_id: file.specials.pad,
        })
    }
}

/// Lowercase the input; applied before every encode and during vocabulary
/// construction so both sides agree on the byte stream.
pub fn normalize(text: &str) -> String {
    text.to_lowercase()
}

/// Learn a byte-pair vocabulary of exactly `target_size` tokens from the
/// corpus. Merges never cross corpus-entry boundaries. Pair selection is
/// by descending frequency, ties broken by lexicographically smallest
/// (left, right) token strings, so construction is deterministic.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], target_size: usize) -> Result<Vocab> {
    if target_size < MIN_VOCAB_SIZE {
        return Err(Error::VocabTooSmall {
            requested: target_size,
            minimum: MIN_VOCAB_SIZE,
        });
    }
    let mut sequences: Vec<Vec<u32>> = corpus
        .iter()
        .map(|s| normalize(s.as_ref()).bytes().map(u32::from).collect())
        .filter(|seq: &Vec<u32>| !seq.is_empty())
        .collect();
    if sequences.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    let mut vocab = Vocab::base();
    while vocab.size() < target_size {
        let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
        for seq in &sequences {
            for pair in seq.windows(2) {
                *counts.entry((pair[0], pair[1])).or_insert(0) += 1;
            }
        }
        let best = counts.into_iter().max_by(|(pa, ca), (pb, cb)| {
            ca.cmp(cb).then_with(|| {
                // Reversed comparison: ties prefer the lexicographically smaller pair.
                let sa = (&vocab.tokens[pa.0 as usize], &vocab.tokens[pa.1 as usize]);
                let sb = (&vocab.tokens[pb.0 as usize], &vocab.tokens[pb.1 as usize]);
                sb.cmp(&sa)
            })
        });
        let Some(((left, right), _count)) = best else {
            break; // no adjacent pairs left to merge
        };
        let merged = vocab.push_merge(left, right);
        for seq in &mut sequences {
            merge_pair_in_place(seq, left, right, merged);
        }
    }
    Ok(vocab)
}

/// Replace every non-overlapping occurrence of `(left, right)` with
/// `merged`, scanning left to right.
fn merge_pair_in_place(seq: &mut Vec<u32>, left: u32, right: u32, merged: u32) {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == left && seq[i + 1] == right {
            out.push(merged);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    *seq = out;
}

/// Apply the merge table greedily: repeatedly merge the pair with the
/// lowest rank until no learned pair remains.
fn apply_merges(vocab: &Vocab, seq: &mut Vec<u32>) {
    loop {
        let mut best: Option<(usize, u32, u32, u32)> = None;
        for pair in seq.windows(2) {
            if let Some(&(rank, merged)) = vocab.merge_table.get(&(pair[0], pair[1])) {
                if best.map_or(true, |(r, ..)| rank < r) {
                    best = Some((rank, pair[0], pair[1], merged));
                }
            }
        }
        match best {
            Some((_, left, right, merged)) => merge_pair_in_place(seq, left, right, merged),
            None => return,
        }
    }
}

/// One encoded row: exactly `context_length` ids, `[SOT, …, EOT, PAD…]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenRow {
    pub ids: Vec<u32>,
    /// Count of non-pad ids including SOT and EOT.
    pub length: usize,
}

/// Encode text into a fixed-length row. Over-long inputs are truncated to
/// `context_length - 2` content tokens so the EOT-closing invariant holds.
pub fn encode(text: &str, vocab: &Vocab, context_length: usize) -> Result<TokenRow> {
    if context_length < 3 {
        return Err(Error::ContextTooShort(context_length));
    }
    let mut seq: Vec<u32> = normalize(text).bytes().map(u32::from).collect();
    apply_merges(vocab, &mut seq);
    seq.truncate(context_length - 2);

    let length = seq.len() + 2;
    let mut ids = Vec::with_capacity(context_length);
    ids.push(vocab.sot_id());
    ids.extend_from_slice(&seq);
    ids.push(vocab.eot_id());
    ids.resize(context_length, vocab.pad_id());
    Ok(TokenRow { ids, length })
}

/// Decode a row back to text. Special tokens are dropped; ids out of range
/// are an error. Inverse of [`encode`] on non-truncated input.
pub fn decode(row: &[u32], vocab: &Vocab) -> Result<String> {
    let char_to_byte = char_to_byte_table();
    let mut bytes = Vec::new();
    for &id in row {
        if id as usize >= vocab.size() {
            return Err(Error::TokenIdOutOfRange {
                id,
                vocab_size: vocab.size(),
            });
        }
        if id == vocab.sot_id() || id == vocab.eot_id() || id == vocab.pad_id() {
            continue;
        }
        for c in vocab.tokens[id as usize].chars() {
            match char_to_byte.get(&c) {
                Some(&b) => bytes.push(b),
                None => {
                    return Err(Error::MalformedVocab(format!(
                        "token {id} contains a character outside the byte alphabet"
                    )))
                }
            }
        }
    }
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

/// A batch of fixed-length rows plus per-row lengths.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    /// `[batch, context_length]`
    pub ids: Array2<u32>,
    pub lengths: Vec<usize>,
    pub context_length: usize,
}

impl TokenBatch {
    /// Encode a batch of texts into one matrix of rows.
    pub fn encode<S: AsRef<str>>(
        texts: &[S],
        vocab: &Vocab,
        context_length: usize,
    ) -> Result<Self> {
        let mut ids = Array2::zeros((texts.len(), context_length));
        let mut lengths = Vec::with_capacity(texts.len());
        for (i, text) in texts.iter().enumerate() {
            let row = encode(text.as_ref(), vocab, context_length)?;
            for (j, &id) in row.ids.iter().enumerate() {
                ids[[i, j]] = id;
            }
            lengths.push(row.length);
        }
        Ok(TokenBatch {
            ids,
            lengths,
            context_length,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.ids.nrows()
    }

    /// Check the row shape invariants: starts with SOT, exactly one EOT at
    /// `length - 1`, PAD afterwards.
    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        for (i, row) in self.ids.outer_iter().enumerate() {
            let len = self.lengths[i];
            if len < 2 || len > self.context_length {
                return Err(Error::MalformedTokenRow(format!(
                    "row {i} has length {len} outside [2, {}]",
                    self.context_length
                )));
            }
            if row[0] != vocab.sot_id() {
                return Err(Error::MalformedTokenRow(format!(
                    "row {i} does not start with SOT"
                )));
            }
            let mut msg = String::new();
            for (j, &id) in row.iter().enumerate() {
                let expect_eot = j == len - 1;
                if (id == vocab.eot_id()) != expect_eot {
                    write!(msg, "row {i} position {j}: EOT placement violated").ok();
                    return Err(Error::MalformedTokenRow(msg));
                }
                if j >= len && id != vocab.pad_id() {
                    write!(msg, "row {i} position {j}: expected PAD").ok();
                    return Err(Error::MalformedTokenRow(msg));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_char_mapping_is_a_bijection() {
        let fwd = byte_to_char_table();
        let back = char_to_byte_table();
        assert_eq!(back.len(), 256);
        for (b, &c) in fwd.iter().enumerate() {
            assert_eq!(back[&c], b as u8);
        }
    }

    #[test]
    fn minimum_vocab_has_no_merges() {
        let vocab = build_vocab(&["hello world"], MIN_VOCAB_SIZE).unwrap();
        assert_eq!(vocab.size(), MIN_VOCAB_SIZE);
        assert!(vocab.merges().is_empty());
    }

    #[test]
    fn single_merge_on_repeated_byte() {
        // One hand-run BPE step on "aaaa": the only pair is ("a","a").
        let vocab = build_vocab(&["aaaa"], MIN_VOCAB_SIZE + 1).unwrap();
        assert_eq!(vocab.merges(), &[("a".to_string(), "a".to_string())]);
        assert_eq!(vocab.token(MIN_VOCAB_SIZE as u32), Some("aa"));
    }

    #[test]
    fn tie_break_is_lexicographic() {
        // "ab" and "ba" pairs appear once each in "aba"; (a,b) < (b,a).
        let vocab = build_vocab(&["aba"], MIN_VOCAB_SIZE + 1).unwrap();
        assert_eq!(vocab.merges()[0], ("a".to_string(), "b".to_string()));
    }

    #[test]
    fn vocab_build_is_deterministic() {
        let corpus = ["привет мир", "hello world", "привет hello"];
        let a = build_vocab(&corpus, 300).unwrap().to_json();
        let b = build_vocab(&corpus, 300).unwrap().to_json();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let err = build_vocab(&[""; 3], 300).unwrap_err();
        assert!(matches!(err, Error::EmptyCorpus));
        let err = build_vocab::<&str>(&[], 300).unwrap_err();
        assert!(matches!(err, Error::EmptyCorpus));
    }

    #[test]
    fn undersized_target_is_an_error() {
        let err = build_vocab(&["abc"], 100).unwrap_err();
        assert!(matches!(err, Error::VocabTooSmall { .. }));
    }

    #[test]
    fn encode_empty_text() {
        let vocab = build_vocab(&["abc"], MIN_VOCAB_SIZE).unwrap();
        let row = encode("", &vocab, 77).unwrap();
        assert_eq!(row.length, 2);
        assert_eq!(row.ids.len(), 77);
        assert_eq!(row.ids[0], vocab.sot_id());
        assert_eq!(row.ids[1], vocab.eot_id());
        assert!(row.ids[2..].iter().all(|&id| id == vocab.pad_id()));
    }

    #[test]
    fn encode_truncates_overlong_text() {
        let vocab = build_vocab(&["abc"], MIN_VOCAB_SIZE).unwrap();
        let long = "x".repeat(500);
        let row = encode(&long, &vocab, 16).unwrap();
        assert_eq!(row.ids.len(), 16);
        assert_eq!(row.length, 16);
        assert_eq!(row.ids[15], vocab.eot_id());
    }

    #[test]
    fn context_below_three_is_an_error() {
        let vocab = build_vocab(&["abc"], MIN_VOCAB_SIZE).unwrap();
        assert!(matches!(
            encode("a", &vocab, 2),
            Err(Error::ContextTooShort(2))
        ));
    }

    #[test]
    fn decode_round_trips_cyrillic() {
        let vocab = build_vocab(&["привет мир"], 320).unwrap();
        let row = encode("привет мир", &vocab, 77).unwrap();
        assert_eq!(decode(&row.ids, &vocab).unwrap(), "привет мир");
    }

    #[test]
    fn decode_rejects_out_of_range_id() {
        let vocab = build_vocab(&["abc"], MIN_VOCAB_SIZE).unwrap();
        let err = decode(&[vocab.size() as u32], &vocab).unwrap_err();
        assert!(matches!(err, Error::TokenIdOutOfRange { .. }));
    }

    #[test]
    fn decode_drops_specials() {
        let vocab = build_vocab(&["abc"], MIN_VOCAB_SIZE).unwrap();
        let ids = vec![vocab.sot_id(), vocab.eot_id(), vocab.pad_id()];
        assert_eq!(decode(&ids, &vocab).unwrap(), "");
    }

    #[test]
    fn json_round_trip_preserves_behavior() {
        let vocab = build_vocab(&["the quick brown fox", "так закалялась сталь"], 350).unwrap();
        let reloaded = Vocab::from_json(&vocab.to_json()).unwrap();
        assert_eq!(reloaded.to_json(), vocab.to_json());
        let a = encode("quick сталь", &vocab, 32).unwrap();
        let b = encode("quick сталь", &reloaded, 32).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn from_json_rejects_inconsistent_files() {
        let vocab = build_vocab(&["aaaa bbbb"], MIN_VOCAB_SIZE + 2).unwrap();
        let json = vocab.to_json();
        // Corrupt a merge reference.
        let bad = json.replacen("\"merges\":[[", "\"merges\":[[\"<|sot|>\",", 1);
        assert!(Vocab::from_json(&bad).is_err());
    }

    #[test]
    fn token_batch_rows_satisfy_invariants() {
        let vocab = build_vocab(&["alpha beta gamma"], 300).unwrap();
        let batch = TokenBatch::encode(&["alpha", "beta beta beta", ""], &vocab, 16).unwrap();
        batch.validate(&vocab).unwrap();
        assert_eq!(batch.batch_size(), 3);
    }

    #[test]
    fn normalization_lowercases_before_encoding() {
        let vocab = build_vocab(&["mixed case"], 300).unwrap();
        let upper = encode("MIXED Case", &vocab, 32).unwrap();
        let lower = encode("mixed case", &vocab, 32).unwrap();
        assert_eq!(upper, lower);
        assert_eq!(decode(&upper.ids, &vocab).unwrap(), "mixed case");
    }
}
