//! WordPiece tokenization: vocabulary files, basic pre-tokenization, greedy
//! longest-match-first subword splitting, and fixed-length encoding for
//! single sentences and sentence pairs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const SPECIALS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];
pub const CONTINUATION: &str = "##";
pub const DEFAULT_MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("vocabulary is missing special token {0}")]
    MissingSpecialToken(&'static str),
    #[error("duplicate vocabulary token `{token}` at line {line}")]
    DuplicateToken { token: String, line: usize },
    #[error("target vocabulary size {0} leaves no room beyond the special tokens")]
    TargetTooSmall(usize),
    #[error("max_seq_len {got} below the minimum of {min}")]
    SequenceTooShort { got: usize, min: usize },
}

/// Token list with dense ids (id = position).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    pad: u32,
    unk: u32,
    cls: u32,
    sep: u32,
    mask: u32,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, TokenizerError> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(TokenizerError::DuplicateToken {
                    token: t.clone(),
                    line: i + 1,
                });
            }
        }
        let find = |s: &'static str| index.get(s).copied().ok_or(TokenizerError::MissingSpecialToken(s));
        Ok(Self {
            pad: find(PAD)?,
            unk: find(UNK)?,
            cls: find(CLS)?,
            sep: find(SEP)?,
            mask: find(MASK)?,
            tokens,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad_id(&self) -> u32 {
        self.pad
    }
    pub fn unk_id(&self) -> u32 {
        self.unk
    }
    pub fn cls_id(&self) -> u32 {
        self.cls
    }
    pub fn sep_id(&self) -> u32 {
        self.sep
    }
    pub fn mask_id(&self) -> u32 {
        self.mask
    }

    pub fn is_special(&self, id: u32) -> bool {
        [self.pad, self.unk, self.cls, self.sep, self.mask].contains(&id)
    }

    /// Ids of every non-special token, ascending.
    pub fn non_special_ids(&self) -> Vec<u32> {
        (0..self.len() as u32).filter(|&i| !self.is_special(i)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let mut body = self.tokens.join("\n");
        body.push('\n');
        fs::write(path, body).map_err(|source| TokenizerError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Reads a vocabulary file: one token per line, id = 0-based line number.
pub fn load_vocab(path: &Path) -> Result<Vocabulary, TokenizerError> {
    let body = fs::read_to_string(path).map_err(|source| TokenizerError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let tokens = body
        .lines()
        .map(|l| l.strip_suffix('\r').unwrap_or(l).to_string())
        .collect();
    Vocabulary::from_tokens(tokens)
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_ascii() && !c.is_alphanumeric() && !c.is_whitespace() && !c.is_control())
}

/// Whitespace split with every punctuation character as its own token.
pub fn basic_tokenize(text: &str, lowercase: bool) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if c.is_whitespace() || c.is_control() {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
        } else if is_punctuation(c) {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
            out.push(c.to_string());
        } else {
            current.push(c);
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    if lowercase {
        for w in &mut out {
            *w = w.to_lowercase();
        }
    }
    out
}

/// Greedy longest-match-first WordPiece. Any failure yields a single `[UNK]`.
pub fn wordpiece(word: &str, vocab: &Vocabulary, max_word_chars: usize) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    if chars.is_empty() {
        return Vec::new();
    }
    if chars.len() > max_word_chars {
        return vec![UNK.to_string()];
    }
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while start < end {
            let mut candidate: String = chars[start..end].iter().collect();
            if start > 0 {
                candidate.insert_str(0, CONTINUATION);
            }
            if vocab.id(&candidate).is_some() {
                found = Some(candidate);
                break;
            }
            end -= 1;
        }
        match found {
            Some(piece) => pieces.push(piece),
            None => return vec![UNK.to_string()],
        }
        start = end;
    }
    pieces
}

/// Tokenizer settings shared by every encoding call.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub vocab: Vocabulary,
    pub lowercase: bool,
    pub max_word_chars: usize,
}

/// One pre-tokenized word and its wordpieces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordPieces {
    pub word: String,
    pub pieces: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedSequence {
    pub ids: Vec<u32>,
    pub tokens: Vec<String>,
    pub attention_mask: Vec<u8>,
    pub segment_ids: Vec<u8>,
}

impl TokenizedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-padding positions (the mask is ones then zeros).
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().take_while(|&&m| m == 1).count()
    }

    /// The same sequence with trailing padding removed.
    pub fn trimmed(&self) -> TokenizedSequence {
        let n = self.real_len();
        TokenizedSequence {
            ids: self.ids[..n].to_vec(),
            tokens: self.tokens[..n].to_vec(),
            attention_mask: self.attention_mask[..n].to_vec(),
            segment_ids: self.segment_ids[..n].to_vec(),
        }
    }
}

impl Tokenizer {
    pub fn new(vocab: Vocabulary) -> Self {
        Self {
            vocab,
            lowercase: true,
            max_word_chars: DEFAULT_MAX_WORD_CHARS,
        }
    }

    pub fn words(&self, text: &str) -> Vec<WordPieces> {
        basic_tokenize(text, self.lowercase)
            .into_iter()
            .map(|word| {
                let pieces = wordpiece(&word, &self.vocab, self.max_word_chars);
                WordPieces { word, pieces }
            })
            .collect()
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        self.words(text).into_iter().flat_map(|w| w.pieces).collect()
    }

    fn id_of(&self, piece: &str) -> u32 {
        self.vocab.id(piece).unwrap_or(self.vocab.unk_id())
    }

    fn finish(&self, pieces: Vec<(String, u8)>, max_seq_len: usize) -> TokenizedSequence {
        let real = pieces.len();
        let mut seq = TokenizedSequence {
            ids: Vec::with_capacity(max_seq_len),
            tokens: Vec::with_capacity(max_seq_len),
            attention_mask: Vec::with_capacity(max_seq_len),
            segment_ids: Vec::with_capacity(max_seq_len),
        };
        for (tok, seg) in pieces {
            seq.ids.push(self.id_of(&tok));
            seq.tokens.push(tok);
            seq.attention_mask.push(1);
            seq.segment_ids.push(seg);
        }
        for _ in real..max_seq_len {
            seq.ids.push(self.vocab.pad_id());
            seq.tokens.push(PAD.to_string());
            seq.attention_mask.push(0);
            seq.segment_ids.push(0);
        }
        seq
    }

    /// `[CLS] pieces [SEP]`, truncated to fit and padded to `max_seq_len`.
    pub fn encode_single(&self, sentence: &str, max_seq_len: usize) -> Result<TokenizedSequence, TokenizerError> {
        self.encode_pieces(self.tokenize(sentence), max_seq_len)
    }

    /// As [`Tokenizer::encode_single`] for already-split wordpieces.
    pub fn encode_pieces(&self, mut pieces: Vec<String>, max_seq_len: usize) -> Result<TokenizedSequence, TokenizerError> {
        if max_seq_len < 3 {
            return Err(TokenizerError::SequenceTooShort { got: max_seq_len, min: 3 });
        }
        pieces.truncate(max_seq_len - 2);
        let mut all = Vec::with_capacity(pieces.len() + 2);
        all.push((CLS.to_string(), 0));
        all.extend(pieces.into_iter().map(|p| (p, 0)));
        all.push((SEP.to_string(), 0));
        Ok(self.finish(all, max_seq_len))
    }

    /// `[CLS] A [SEP] B [SEP]`; when too long, one piece at a time is removed
    /// from the end of the longer segment (B on ties).
    pub fn encode_pair(&self, sent_a: &str, sent_b: &str, max_seq_len: usize) -> Result<TokenizedSequence, TokenizerError> {
        self.encode_pair_pieces(self.tokenize(sent_a), self.tokenize(sent_b), max_seq_len)
    }

    pub fn encode_pair_pieces(
        &self,
        mut a: Vec<String>,
        mut b: Vec<String>,
        max_seq_len: usize,
    ) -> Result<TokenizedSequence, TokenizerError> {
        if max_seq_len < 5 {
            return Err(TokenizerError::SequenceTooShort { got: max_seq_len, min: 5 });
        }
        let budget = max_seq_len - 3;
        while a.len() + b.len() > budget {
            if a.len() > b.len() {
                a.pop();
            } else {
                b.pop();
            }
        }
        let mut all = Vec::with_capacity(a.len() + b.len() + 3);
        all.push((CLS.to_string(), 0));
        all.extend(a.into_iter().map(|p| (p, 0)));
        all.push((SEP.to_string(), 0));
        all.extend(b.into_iter().map(|p| (p, 1)));
        all.push((SEP.to_string(), 1));
        Ok(self.finish(all, max_seq_len))
    }
}

/// Small vocabulary for tests and desk-scale runs: the specials, the most
/// frequent whole words until `target_size` entries, then every corpus
/// character both as a standalone token and as a `##` continuation.
/// Frequency ties break lexicographically.
pub fn build_test_vocab<'a, I>(corpus: I, target_size: usize, lowercase: bool) -> Result<Vocabulary, TokenizerError>
where
    I: IntoIterator<Item = &'a str>,
{
    if target_size <= SPECIALS.len() {
        return Err(TokenizerError::TargetTooSmall(target_size));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut chars: BTreeSet<char> = BTreeSet::new();
    for text in corpus {
        for w in basic_tokenize(text, lowercase) {
            chars.extend(w.chars());
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    // BTreeMap order is lexicographic; a stable sort by count keeps it for ties
    ranked.sort_by(|a, b| b.1.cmp(&a.1));

    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    let mut seen: BTreeSet<String> = tokens.iter().cloned().collect();
    for (w, _) in ranked {
        if tokens.len() >= target_size {
            break;
        }
        if seen.insert(w.clone()) {
            tokens.push(w);
        }
    }
    for c in chars {
        for t in [c.to_string(), format!("{CONTINUATION}{c}")] {
            if seen.insert(t.clone()) {
                tokens.push(t);
            }
        }
    }
    Vocabulary::from_tokens(tokens)
}
