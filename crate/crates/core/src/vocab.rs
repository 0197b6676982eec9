//! Word vocabularies and the radix token codec.
//!
//! A [`WordVocab`] assigns dense indices to words by descending corpus
//! frequency. A [`RadixVocab`] re-expresses each word index as `d` base-`v`
//! digits so that the model only ever sees `v + 2` distinct token ids: the
//! digits `0..v`, plus `v` for BOS and `v + 1` for EOS.
//!
//! Digits are emitted least-significant first.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};

use thiserror::Error;

/// Reserved spelling of the out-of-vocabulary entry.
pub const UNK_TOKEN: &str = "<UNK>";

/// Default frequency cut-off used when building vocabularies from a corpus.
pub const DEFAULT_MIN_FREQUENCY: u64 = 5;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VocabError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("min_frequency must be at least 1")]
    ZeroMinFrequency,
    #[error("radix base must be at least 2, got {0}")]
    BaseTooSmall(usize),
    #[error("vocabulary size must be at least 1")]
    EmptyVocabulary,
    #[error("{base}^{digits} overflows the index range")]
    RadixOverflow { base: usize, digits: usize },
    #[error("radix {base}^{digits} cannot represent {size} words")]
    RadixTooSmall { base: usize, digits: usize, size: usize },
    #[error("index out of radix range: {index} >= {base}^{digits}")]
    IndexOutOfRadixRange { index: usize, base: usize, digits: usize },
    #[error("special token inside digit group: {0}")]
    SpecialTokenInDigits(usize),
    #[error("expected {expected} digits, got {got}")]
    DigitCount { expected: usize, got: usize },
    #[error("index {index} outside vocabulary of {size} words")]
    OutOfVocabulary { index: usize, size: usize },
    #[error("BOS token in the middle of the stream at position {0}")]
    BosMidStream(usize),
    #[error("token id {id} out of range (encoded vocabulary size {size})")]
    TokenOutOfRange { id: usize, size: usize },
    #[error("stream mode {found} does not match codec mode {expected}")]
    ModeMismatch { expected: StreamMode, found: StreamMode },
    #[error("vocabulary file line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for VocabError {
    fn from(e: std::io::Error) -> Self {
        VocabError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, VocabError>;

/// Frequency-ranked word vocabulary. `<UNK>` always occupies the last index.
#[derive(Debug, Clone, PartialEq)]
pub struct WordVocab {
    words: Vec<String>,
    counts: Vec<u64>,
    index_of: HashMap<String, usize>,
    unk_index: usize,
}

impl WordVocab {
    /// Builds a vocabulary from whitespace-tokenized captions.
    ///
    /// Words seen fewer than `min_frequency` times are dropped; their
    /// occurrences are tallied under `<UNK>`.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_frequency: u64) -> Result<Self> {
        if min_frequency == 0 {
            return Err(VocabError::ZeroMinFrequency);
        }
        let mut tally: HashMap<&str, u64> = HashMap::new();
        for caption in corpus {
            for word in caption.as_ref().split_whitespace() {
                *tally.entry(word).or_default() += 1;
            }
        }
        if tally.is_empty() {
            return Err(VocabError::EmptyCorpus);
        }

        let mut ranked: Vec<(&str, u64)> = tally.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut words = Vec::new();
        let mut counts = Vec::new();
        let mut dropped = 0u64;
        for (word, count) in ranked {
            // A literal "<UNK>" in the corpus folds into the reserved entry.
            if count < min_frequency || word == UNK_TOKEN {
                dropped += count;
            } else {
                words.push(word.to_string());
                counts.push(count);
            }
        }
        words.push(UNK_TOKEN.to_string());
        counts.push(dropped);
        Ok(Self::from_parts(words, counts))
    }

    fn from_parts(words: Vec<String>, counts: Vec<u64>) -> Self {
        let index_of = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        let unk_index = words.len() - 1;
        WordVocab {
            words,
            counts,
            index_of,
            unk_index,
        }
    }

    /// Number of regular indices, `<UNK>` included.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn unk_index(&self) -> usize {
        self.unk_index
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.index_of.get(word).copied()
    }

    /// Index of `word`, or the `<UNK>` index when absent.
    pub fn index_or_unk(&self, word: &str) -> usize {
        self.index_of(word).unwrap_or(self.unk_index)
    }

    pub fn word(&self, index: usize) -> Option<&str> {
        self.words.get(index).map(String::as_str)
    }

    /// Writes `word<TAB>count` lines; the line number is the index.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> Result<()> {
        for (word, count) in self.words.iter().zip(&self.counts) {
            writeln!(out, "{word}\t{count}")?;
        }
        Ok(())
    }

    /// Reads the format produced by [`WordVocab::write_tsv`].
    pub fn read_tsv<R: BufRead>(input: R) -> Result<Self> {
        let mut words = Vec::new();
        let mut counts = Vec::new();
        for (n, line) in input.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (word, count) = line.split_once('\t').ok_or_else(|| VocabError::Malformed {
                line: n + 1,
                reason: "expected word<TAB>count".into(),
            })?;
            let count: u64 = count.trim().parse().map_err(|_| VocabError::Malformed {
                line: n + 1,
                reason: format!("bad count {count:?}"),
            })?;
            if word.is_empty() || word.contains(char::is_whitespace) {
                return Err(VocabError::Malformed {
                    line: n + 1,
                    reason: format!("bad word {word:?}"),
                });
            }
            if word != UNK_TOKEN {
                if words.last().map(String::as_str) == Some(UNK_TOKEN) {
                    return Err(VocabError::Malformed {
                        line: n + 1,
                        reason: "<UNK> must be the last entry".into(),
                    });
                }
                if counts.last().is_some_and(|&prev| prev < count) {
                    return Err(VocabError::Malformed {
                        line: n + 1,
                        reason: "counts must be in descending order".into(),
                    });
                }
            }
            words.push(word.to_string());
            counts.push(count);
        }
        if words.is_empty() {
            return Err(VocabError::EmptyCorpus);
        }
        if words.last().map(String::as_str) != Some(UNK_TOKEN) {
            words.push(UNK_TOKEN.to_string());
            counts.push(0);
        }
        let vocab = Self::from_parts(words, counts);
        if vocab.index_of.len() != vocab.words.len() {
            return Err(VocabError::Malformed {
                line: 0,
                reason: "duplicate words".into(),
            });
        }
        Ok(vocab)
    }
}

/// Smallest `d >= 1` with `base^d >= vocab_size`.
pub fn radix_digits(vocab_size: usize, base: usize) -> Result<usize> {
    if base < 2 {
        return Err(VocabError::BaseTooSmall(base));
    }
    if vocab_size == 0 {
        return Err(VocabError::EmptyVocabulary);
    }
    let mut digits = 1;
    let mut capacity = base;
    while capacity < vocab_size {
        capacity = capacity
            .checked_mul(base)
            .ok_or(VocabError::RadixOverflow { base, digits })?;
        digits += 1;
    }
    Ok(digits)
}

/// A word-level token before radix factorization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WordToken {
    Word(usize),
    Bos,
    Eos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StreamMode {
    WordLevel,
    Radix,
}

impl fmt::Display for StreamMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StreamMode::WordLevel => f.write_str("word-level"),
            StreamMode::Radix => f.write_str("radix"),
        }
    }
}

/// Token ids as consumed and produced by the captioner.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    pub ids: Vec<usize>,
    pub mode: StreamMode,
}

impl TokenStream {
    pub fn new(ids: Vec<usize>, mode: StreamMode) -> Self {
        TokenStream { ids, mode }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Whitespace-separated decimal ids.
    pub fn to_text(&self) -> String {
        let parts: Vec<String> = self.ids.iter().map(usize::to_string).collect();
        parts.join(" ")
    }

    pub fn parse(text: &str, mode: StreamMode) -> Result<Self> {
        let ids = text
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>().map_err(|_| VocabError::Malformed {
                    line: 1,
                    reason: format!("bad token id {t:?}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TokenStream { ids, mode })
    }
}

/// Radix factorization of a [`WordVocab`].
#[derive(Debug, Clone, PartialEq)]
pub struct RadixVocab {
    base: usize,
    digits: usize,
    words: WordVocab,
}

impl RadixVocab {
    /// Uses the fewest digits able to cover the vocabulary.
    pub fn new(words: WordVocab, base: usize) -> Result<Self> {
        let digits = radix_digits(words.len(), base)?;
        Ok(RadixVocab {
            base,
            digits,
            words,
        })
    }

    pub fn with_digits(words: WordVocab, base: usize, digits: usize) -> Result<Self> {
        if base < 2 {
            return Err(VocabError::BaseTooSmall(base));
        }
        let capacity = checked_pow(base, digits).ok_or(VocabError::RadixOverflow { base, digits })?;
        if digits == 0 || capacity < words.len() {
            return Err(VocabError::RadixTooSmall {
                base,
                digits,
                size: words.len(),
            });
        }
        Ok(RadixVocab {
            base,
            digits,
            words,
        })
    }

    pub fn base(&self) -> usize {
        self.base
    }

    pub fn digits(&self) -> usize {
        self.digits
    }

    pub fn bos_id(&self) -> usize {
        self.base
    }

    pub fn eos_id(&self) -> usize {
        self.base + 1
    }

    /// Always `v + 2`, independent of the word vocabulary size.
    pub fn encoded_size(&self) -> usize {
        self.base + 2
    }

    pub fn word_vocab(&self) -> &WordVocab {
        &self.words
    }

    /// `v^d`, or `None` when it overflows `usize` (in which case every
    /// index is representable).
    fn capacity(&self) -> Option<usize> {
        checked_pow(self.base, self.digits)
    }

    pub fn encode_index(&self, token: WordToken) -> Result<Vec<usize>> {
        match token {
            WordToken::Bos => Ok(vec![self.bos_id()]),
            WordToken::Eos => Ok(vec![self.eos_id()]),
            WordToken::Word(index) => {
                if self.capacity().is_some_and(|cap| index >= cap) {
                    return Err(VocabError::IndexOutOfRadixRange {
                        index,
                        base: self.base,
                        digits: self.digits,
                    });
                }
                let mut rest = index;
                let digits = (0..self.digits)
                    .map(|_| {
                        let digit = rest % self.base;
                        rest /= self.base;
                        digit
                    })
                    .collect();
                Ok(digits)
            }
        }
    }

    /// Inverse of [`RadixVocab::encode_index`] for regular words.
    ///
    /// Out-of-vocabulary combinations map to `<UNK>` unless `strict`.
    pub fn decode_digits(&self, digits: &[usize], strict: bool) -> Result<usize> {
        if digits.len() != self.digits {
            return Err(VocabError::DigitCount {
                expected: self.digits,
                got: digits.len(),
            });
        }
        let mut index = 0usize;
        let mut place = 1usize;
        for &digit in digits {
            if digit >= self.base {
                return Err(VocabError::SpecialTokenInDigits(digit));
            }
            index = digit
                .checked_mul(place)
                .and_then(|d| index.checked_add(d))
                .unwrap_or(usize::MAX);
            place = place.saturating_mul(self.base);
        }
        if index >= self.words.len() {
            if strict {
                return Err(VocabError::OutOfVocabulary {
                    index,
                    size: self.words.len(),
                });
            }
            return Ok(self.words.unk_index());
        }
        Ok(index)
    }

    /// `[BOS] ++ digits(word_0) ++ ... ++ [EOS]`; unknown words become `<UNK>`.
    pub fn encode_caption<S: AsRef<str>>(&self, words: &[S]) -> Result<TokenStream> {
        let mut ids = Vec::with_capacity(2 + self.digits * words.len());
        ids.push(self.bos_id());
        for word in words {
            let index = self.words.index_or_unk(word.as_ref());
            ids.extend(self.encode_index(WordToken::Word(index))?);
        }
        ids.push(self.eos_id());
        Ok(TokenStream::new(ids, StreamMode::Radix))
    }

    /// Groups digits back into words. A trailing group shorter than `d`
    /// is dropped.
    pub fn decode_stream(&self, stream: &TokenStream, strict: bool) -> Result<Vec<String>> {
        if stream.mode != StreamMode::Radix {
            return Err(VocabError::ModeMismatch {
                expected: StreamMode::Radix,
                found: stream.mode,
            });
        }
        let mut words = Vec::new();
        let mut group = Vec::with_capacity(self.digits);
        for (pos, &id) in stream.ids.iter().enumerate() {
            if id == self.eos_id() {
                break;
            }
            if id == self.bos_id() {
                if pos == 0 || !strict {
                    continue;
                }
                return Err(VocabError::BosMidStream(pos));
            }
            if id > self.eos_id() {
                return Err(VocabError::TokenOutOfRange {
                    id,
                    size: self.encoded_size(),
                });
            }
            group.push(id);
            if group.len() == self.digits {
                let index = self.decode_digits(&group, strict)?;
                words.push(self.words.words[index].clone());
                group.clear();
            }
        }
        Ok(words)
    }
}

fn checked_pow(base: usize, exp: usize) -> Option<usize> {
    u32::try_from(exp).ok().and_then(|e| base.checked_pow(e))
}

/// Either a plain word-level codec or a radix codec over the same words.
///
/// Word-level streams place BOS and EOS right after the regular indices.
#[derive(Debug, Clone, PartialEq)]
pub enum TokenCodec {
    WordLevel(WordVocab),
    Radix(RadixVocab),
}

impl TokenCodec {
    /// `radix_base == 0` selects the word-level codec.
    pub fn new(words: WordVocab, radix_base: usize) -> Result<Self> {
        if radix_base == 0 {
            Ok(TokenCodec::WordLevel(words))
        } else {
            Ok(TokenCodec::Radix(RadixVocab::new(words, radix_base)?))
        }
    }

    pub fn mode(&self) -> StreamMode {
        match self {
            TokenCodec::WordLevel(_) => StreamMode::WordLevel,
            TokenCodec::Radix(_) => StreamMode::Radix,
        }
    }

    pub fn word_vocab(&self) -> &WordVocab {
        match self {
            TokenCodec::WordLevel(w) => w,
            TokenCodec::Radix(r) => r.word_vocab(),
        }
    }

    /// Number of rows in the model's embedding tables.
    pub fn encoded_size(&self) -> usize {
        match self {
            TokenCodec::WordLevel(w) => w.len() + 2,
            TokenCodec::Radix(r) => r.encoded_size(),
        }
    }

    pub fn bos_id(&self) -> usize {
        match self {
            TokenCodec::WordLevel(w) => w.len(),
            TokenCodec::Radix(r) => r.bos_id(),
        }
    }

    pub fn eos_id(&self) -> usize {
        self.bos_id() + 1
    }

    /// Tokens emitted per word.
    pub fn tokens_per_word(&self) -> usize {
        match self {
            TokenCodec::WordLevel(_) => 1,
            TokenCodec::Radix(r) => r.digits(),
        }
    }

    pub fn encode_caption<S: AsRef<str>>(&self, words: &[S]) -> Result<TokenStream> {
        match self {
            TokenCodec::Radix(r) => r.encode_caption(words),
            TokenCodec::WordLevel(w) => {
                let mut ids = Vec::with_capacity(words.len() + 2);
                ids.push(self.bos_id());
                ids.extend(words.iter().map(|word| w.index_or_unk(word.as_ref())));
                ids.push(self.eos_id());
                Ok(TokenStream::new(ids, StreamMode::WordLevel))
            }
        }
    }

    pub fn encode_text(&self, caption: &str) -> Result<TokenStream> {
        let words: Vec<&str> = caption.split_whitespace().collect();
        self.encode_caption(&words)
    }

    pub fn decode_stream(&self, stream: &TokenStream, strict: bool) -> Result<Vec<String>> {
        match self {
            TokenCodec::Radix(r) => r.decode_stream(stream, strict),
            TokenCodec::WordLevel(w) => {
                if stream.mode != StreamMode::WordLevel {
                    return Err(VocabError::ModeMismatch {
                        expected: StreamMode::WordLevel,
                        found: stream.mode,
                    });
                }
                let mut words = Vec::new();
                for (pos, &id) in stream.ids.iter().enumerate() {
                    if id == self.eos_id() {
                        break;
                    }
                    if id == self.bos_id() {
                        if pos == 0 || !strict {
                            continue;
                        }
                        return Err(VocabError::BosMidStream(pos));
                    }
                    let word = w.word(id).ok_or(VocabError::TokenOutOfRange {
                        id,
                        size: self.encoded_size(),
                    })?;
                    words.push(word.to_string());
                }
                Ok(words)
            }
        }
    }

    /// Lenient decode joined with single spaces.
    pub fn caption_from_tokens(&self, stream: &TokenStream) -> Result<String> {
        Ok(self.decode_stream(stream, false)?.join(" "))
    }
}
