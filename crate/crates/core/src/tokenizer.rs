//! Tokenizers behind one interface.
//!
//! The desk profile uses [`WordTokenizer`]: case-folded words and single
//! punctuation marks. The pretrained profile uses [`BpeTokenizer`], a
//! byte-level BPE read from `vocab.json` + `merges.txt`. Both reserve the
//! placeholder and the two speaker markers as atomic tokens.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PLACEHOLDER: &str = "[MOVIE]";
pub const SEEKER_MARKER: &str = "[SEEKER]";
pub const RECOMMENDER_MARKER: &str = "[RECOMMENDER]";
pub const BOS: &str = "<s>";
pub const PAD: &str = "<pad>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub bos: usize,
    pub pad: usize,
    pub eos: usize,
    pub unk: usize,
    pub placeholder: usize,
    pub seeker: usize,
    pub recommender: usize,
}

impl SpecialIds {
    pub fn contains(&self, id: usize) -> bool {
        [
            self.bos,
            self.pad,
            self.eos,
            self.unk,
            self.placeholder,
            self.seeker,
            self.recommender,
        ]
        .contains(&id)
    }
}

/// Splits `text` around every literal placeholder. Odd positions of the
/// result are placeholders.
fn split_placeholders(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(pos) = rest.find(PLACEHOLDER) {
        out.push(&rest[..pos]);
        out.push(PLACEHOLDER);
        rest = &rest[pos + PLACEHOLDER.len()..];
    }
    out.push(rest);
    out
}

/// Case-folded words and punctuation, with `[MOVIE]` kept atomic.
pub fn word_pieces(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for (i, segment) in split_placeholders(text).into_iter().enumerate() {
        if i % 2 == 1 {
            out.push(PLACEHOLDER.to_string());
            continue;
        }
        let mut word = String::new();
        for ch in segment.chars() {
            if ch.is_alphanumeric() {
                word.extend(ch.to_lowercase());
                continue;
            }
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_lowercase().collect());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Joins word pieces for display: no space before closing punctuation.
pub fn detokenize(pieces: &[&str]) -> String {
    let mut out = String::new();
    for (i, piece) in pieces.iter().enumerate() {
        let attach = matches!(*piece, "." | "," | "!" | "?" | ";" | ":" | ")" | "'" | "%")
            || (i > 0 && pieces[i - 1] == "(")
            || (i > 0 && pieces[i - 1] == "'");
        if i > 0 && !attach {
            out.push(' ');
        }
        out.push_str(piece);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordTokenizer {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl WordTokenizer {
    /// Builds a vocabulary from every word piece in `texts`, sorted for
    /// determinism, after the reserved tokens.
    pub fn build<'t>(texts: impl IntoIterator<Item = &'t str>) -> Self {
        let mut words = BTreeSet::new();
        for text in texts {
            for piece in word_pieces(text) {
                words.insert(piece);
            }
        }
        let mut tokens: Vec<String> = [
            BOS,
            PAD,
            EOS,
            UNK,
            PLACEHOLDER,
            SEEKER_MARKER,
            RECOMMENDER_MARKER,
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for w in words {
            if !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }
}

/// GPT-2 style byte-level BPE.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeTokenizer {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    byte_encoder: Vec<char>,
    byte_decoder: HashMap<char, u8>,
    special: SpecialIds,
}

fn bytes_to_unicode() -> Vec<char> {
    let mut printable: Vec<u32> = (b'!' as u32..=b'~' as u32)
        .chain(0xA1..=0xAC)
        .chain(0xAE..=0xFF)
        .collect();
    let mut chars = printable.clone();
    let mut n = 0;
    for b in 0..256u32 {
        if !printable.contains(&b) {
            printable.push(b);
            chars.push(256 + n);
            n += 1;
        }
    }
    let mut table = vec!['\0'; 256];
    for (b, c) in printable.into_iter().zip(chars) {
        table[b as usize] = char::from_u32(c).expect("valid code point");
    }
    table
}

#[derive(Clone, Copy, PartialEq)]
enum CharClass {
    Letter,
    Number,
    Space,
    Other,
}

fn class_of(c: char) -> CharClass {
    if c.is_alphabetic() {
        CharClass::Letter
    } else if c.is_numeric() {
        CharClass::Number
    } else if c.is_whitespace() {
        CharClass::Space
    } else {
        CharClass::Other
    }
}

/// Hand-rolled equivalent of the GPT-2 pre-tokenisation pattern
/// (contractions, optional leading space + letters/numbers/other, whitespace).
fn gpt2_pretokenize(text: &str) -> Vec<String> {
    const CONTRACTIONS: [&str; 7] = ["'s", "'t", "'re", "'ve", "'m", "'ll", "'d"];
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i] == '\'' {
            let rest: String = chars[i..chars.len().min(i + 3)].iter().collect();
            if let Some(c) = CONTRACTIONS.iter().find(|c| rest.starts_with(**c)) {
                out.push(c.to_string());
                i += c.chars().count();
                continue;
            }
        }
        let start = i;
        let mut j = i;
        if chars[j] == ' ' && j + 1 < chars.len() && class_of(chars[j + 1]) != CharClass::Space {
            j += 1;
        }
        let class = class_of(chars[j]);
        if class == CharClass::Space {
            // A whitespace run gives its last char to the following word.
            let mut end = j;
            while end < chars.len() && class_of(chars[end]) == CharClass::Space {
                end += 1;
            }
            if end < chars.len() && end - start > 1 && chars[end - 1] == ' ' {
                end -= 1;
            }
            out.push(chars[start..end].iter().collect());
            i = end;
            continue;
        }
        let mut end = j + 1;
        while end < chars.len() && class_of(chars[end]) == class {
            if class == CharClass::Other && chars[end] == '\'' {
                break;
            }
            end += 1;
        }
        out.push(chars[start..end].iter().collect());
        i = end;
    }
    out
}

impl BpeTokenizer {
    /// `vocab` maps token strings to ids (as in `vocab.json`); `merges` are
    /// the lines of `merges.txt` without the version header. The placeholder
    /// and speaker markers are appended when absent.
    pub fn new(vocab: HashMap<String, usize>, merges: Vec<(String, String)>) -> Result<Self> {
        let mut tokens = vec![String::new(); vocab.len()];
        for (tok, &id) in &vocab {
            if id >= tokens.len() {
                return Err(Error::Validation(format!(
                    "bpe vocab ids are not contiguous (id {id} for {tok:?})"
                )));
            }
            tokens[id] = tok.clone();
        }
        let mut index = vocab;
        for extra in [PLACEHOLDER, SEEKER_MARKER, RECOMMENDER_MARKER] {
            if !index.contains_key(extra) {
                index.insert(extra.to_string(), tokens.len());
                tokens.push(extra.to_string());
            }
        }
        let lookup = |t: &str| {
            index
                .get(t)
                .copied()
                .ok_or_else(|| Error::Validation(format!("bpe vocab lacks special token {t}")))
        };
        let special = SpecialIds {
            bos: lookup(BOS)?,
            pad: lookup(PAD)?,
            eos: lookup(EOS)?,
            unk: lookup(UNK)?,
            placeholder: lookup(PLACEHOLDER)?,
            seeker: lookup(SEEKER_MARKER)?,
            recommender: lookup(RECOMMENDER_MARKER)?,
        };
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i))
            .collect();
        let byte_encoder = bytes_to_unicode();
        let byte_decoder = byte_encoder
            .iter()
            .enumerate()
            .map(|(b, &c)| (c, b as u8))
            .collect();
        Ok(Self {
            tokens,
            index,
            merges,
            ranks,
            byte_encoder,
            byte_decoder,
            special,
        })
    }

    pub fn from_files(vocab_json: &str, merges_txt: &str) -> Result<Self> {
        let vocab: HashMap<String, usize> = serde_json::from_str(vocab_json)?;
        let merges = merges_txt
            .lines()
            .filter(|l| !l.starts_with("#version") && !l.trim().is_empty())
            .map(|l| {
                let mut parts = l.split(' ');
                match (parts.next(), parts.next()) {
                    (Some(a), Some(b)) => Ok((a.to_string(), b.to_string())),
                    _ => Err(Error::Validation(format!("bad merge line {l:?}"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(vocab, merges)
    }

    fn bpe(&self, word: &str) -> Vec<String> {
        let mut parts: Vec<String> = word.chars().map(|c| c.to_string()).collect();
        while parts.len() > 1 {
            let best = parts
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&r| (r, i))
                })
                .min();
            let Some((_, i)) = best else { break };
            let merged = format!("{}{}", parts[i], parts[i + 1]);
            parts.splice(i..i + 2, [merged]);
        }
        parts
    }

    fn encode_segment(&self, text: &str, out: &mut Vec<usize>) {
        for word in gpt2_pretokenize(text) {
            let mapped: String = word.bytes().map(|b| self.byte_encoder[b as usize]).collect();
            for piece in self.bpe(&mapped) {
                out.push(self.index.get(&piece).copied().unwrap_or(self.special.unk));
            }
        }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }
}

/// Tokenizer used by a model; see module docs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Tokenizer {
    Word(WordTokenizer),
    Bpe(BpeTokenizer),
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TokenizerFile {
    Word {
        tokens: Vec<String>,
    },
    Bpe {
        tokens: Vec<String>,
        merges: Vec<(String, String)>,
    },
}

impl Tokenizer {
    pub fn word<'t>(texts: impl IntoIterator<Item = &'t str>) -> Self {
        Tokenizer::Word(WordTokenizer::build(texts))
    }

    fn tokens(&self) -> &[String] {
        match self {
            Tokenizer::Word(w) => &w.tokens,
            Tokenizer::Bpe(b) => &b.tokens,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens().len()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens()[id]
    }

    pub fn special(&self) -> SpecialIds {
        match self {
            Tokenizer::Word(w) => SpecialIds {
                bos: w.id(BOS).expect("reserved"),
                pad: w.id(PAD).expect("reserved"),
                eos: w.id(EOS).expect("reserved"),
                unk: w.id(UNK).expect("reserved"),
                placeholder: w.id(PLACEHOLDER).expect("reserved"),
                seeker: w.id(SEEKER_MARKER).expect("reserved"),
                recommender: w.id(RECOMMENDER_MARKER).expect("reserved"),
            },
            Tokenizer::Bpe(b) => b.special,
        }
    }

    /// Token ids of `text`, without sequence markers.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        match self {
            Tokenizer::Word(w) => {
                let unk = w.id(UNK).expect("reserved");
                word_pieces(text)
                    .iter()
                    .map(|p| w.id(p).unwrap_or(unk))
                    .collect()
            }
            Tokenizer::Bpe(b) => {
                let mut out = Vec::new();
                for (i, segment) in split_placeholders(text).into_iter().enumerate() {
                    if i % 2 == 1 {
                        out.push(b.special.placeholder);
                    } else {
                        b.encode_segment(segment, &mut out);
                    }
                }
                out
            }
        }
    }

    /// Content tokens of `ids` as strings: specials dropped except the placeholder.
    pub fn pieces(&self, ids: &[usize]) -> Vec<String> {
        let sp = self.special();
        ids.iter()
            .filter(|&&id| id == sp.placeholder || !sp.contains(id))
            .map(|&id| self.token(id).to_string())
            .collect()
    }

    /// Canonical text form: tokens joined by single spaces (word tokenizer)
    /// or the decoded byte string (BPE). Specials other than the placeholder
    /// are dropped. `decode(encode(t)) == t` for normalised in-vocabulary text.
    pub fn decode(&self, ids: &[usize]) -> String {
        match self {
            Tokenizer::Word(_) => self.pieces(ids).join(" "),
            Tokenizer::Bpe(b) => self.decode_bpe(b, ids),
        }
    }

    fn decode_bpe(&self, b: &BpeTokenizer, ids: &[usize]) -> String {
        let sp = b.special;
        let mut bytes = Vec::new();
        for &id in ids {
            if id == sp.placeholder {
                bytes.extend_from_slice(PLACEHOLDER.as_bytes());
            } else if !sp.contains(id) {
                for ch in b.tokens[id].chars() {
                    if let Some(&byte) = b.byte_decoder.get(&ch) {
                        bytes.push(byte);
                    }
                }
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    /// Human-readable text for display.
    pub fn decode_pretty(&self, ids: &[usize]) -> String {
        match self {
            Tokenizer::Word(_) => {
                let pieces = self.pieces(ids);
                let refs: Vec<&str> = pieces.iter().map(String::as_str).collect();
                detokenize(&refs)
            }
            Tokenizer::Bpe(b) => self.decode_bpe(b, ids).trim().to_string(),
        }
    }

    /// Stable digest of the vocabulary (and merges for BPE).
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in self.tokens() {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        if let Tokenizer::Bpe(b) = self {
            for (a, c) in &b.merges {
                h.update(a.as_bytes());
                h.update([1u8]);
                h.update(c.as_bytes());
                h.update([0u8]);
            }
        }
        hex::encode(h.finalize())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = match self {
            Tokenizer::Word(w) => TokenizerFile::Word {
                tokens: w.tokens.clone(),
            },
            Tokenizer::Bpe(b) => TokenizerFile::Bpe {
                tokens: b.tokens.clone(),
                merges: b.merges.clone(),
            },
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        match serde_json::from_str(text)? {
            TokenizerFile::Word { tokens } => Ok(Tokenizer::Word(WordTokenizer::from_tokens(tokens))),
            TokenizerFile::Bpe { tokens, merges } => {
                let vocab = tokens.into_iter().enumerate().map(|(i, t)| (t, i)).collect();
                Ok(Tokenizer::Bpe(BpeTokenizer::new(vocab, merges)?))
            }
        }
    }
}
