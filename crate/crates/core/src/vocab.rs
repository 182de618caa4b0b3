//! Character-level vocabulary and token sequences.
//!
//! The vocabulary is a fixed, explicit character set covering every string
//! the task generators can emit, plus `<pad>`, `<bos>`, `<eos>` specials.
//! Fixing the set (rather than deriving it from data) keeps token ids stable
//! across corpora, so checkpoints from different runs stay compatible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Every text character the corpus templates can produce, in canonical id order.
pub const VOCAB_CHARS: &str = " \n+-*=.:0123456789ABCDEQSTaehinorstw";

/// Ordered list of token ids; the common currency between modules.
///
/// Invariants: ids are below the vocabulary size, and `<eos>` appears at most
/// once, only in the final position. Constructors in this module uphold both;
/// [`TokenSeq::validate`] re-checks data read from external files.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq {
    ids: Vec<u32>,
}

impl TokenSeq {
    /// Wrap raw ids without validation (internal use).
    pub(crate) fn from_ids_unchecked(ids: Vec<u32>) -> Self {
        TokenSeq { ids }
    }

    /// Wrap raw ids, checking both sequence invariants against `vocab`.
    pub fn from_ids(ids: Vec<u32>, vocab: &Vocabulary) -> Result<Self> {
        let seq = TokenSeq { ids };
        seq.validate(vocab)?;
        Ok(seq)
    }

    /// Re-check the sequence invariants.
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        let v = vocab.size() as u32;
        for (i, &id) in self.ids.iter().enumerate() {
            if id >= v {
                return Err(Error::Config(format!("token id {id} out of range (V={v})")));
            }
            if id == vocab.eos_id && i + 1 != self.ids.len() {
                return Err(Error::Config("eos before final position".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.ids
    }

    /// Concatenation `self ⊙ other`.
    pub fn concat(&self, other: &TokenSeq) -> TokenSeq {
        let mut ids = self.ids.clone();
        ids.extend_from_slice(&other.ids);
        TokenSeq { ids }
    }

    /// The first `n` tokens as a new sequence.
    pub fn prefix(&self, n: usize) -> TokenSeq {
        TokenSeq {
            ids: self.ids[..n].to_vec(),
        }
    }

    /// Tokens from position `n` to the end as a new sequence.
    pub fn suffix(&self, n: usize) -> TokenSeq {
        TokenSeq {
            ids: self.ids[n..].to_vec(),
        }
    }

    pub(crate) fn push(&mut self, id: u32) {
        self.ids.push(id);
    }
}

impl std::ops::Deref for TokenSeq {
    type Target = [u32];
    fn deref(&self) -> &[u32] {
        &self.ids
    }
}

impl From<TokenSeq> for Vec<u32> {
    fn from(seq: TokenSeq) -> Vec<u32> {
        seq.ids
    }
}

/// The fixed character vocabulary plus special tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    pub pad_id: u32,
    pub bos_id: u32,
    pub eos_id: u32,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    /// The canonical vocabulary: `<pad>`, `<bos>`, `<eos>`, then [`VOCAB_CHARS`].
    pub fn new() -> Self {
        let mut tokens: Vec<String> = vec![
            "<pad>".to_string(),
            "<bos>".to_string(),
            "<eos>".to_string(),
        ];
        tokens.extend(VOCAB_CHARS.chars().map(|c| c.to_string()));
        Vocabulary {
            tokens,
            pad_id: 0,
            bos_id: 1,
            eos_id: 2,
        }
    }

    /// Rebuild from a stored token list (checkpoint load); validates shape.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let canon = Vocabulary::new();
        if tokens != canon.tokens {
            return Err(Error::Checkpoint(
                "stored vocabulary does not match the canonical token list".into(),
            ));
        }
        Ok(canon)
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Text of one token; specials render as empty strings.
    pub fn token_text(&self, id: u32) -> &str {
        if id == self.pad_id || id == self.bos_id || id == self.eos_id {
            ""
        } else {
            &self.tokens[id as usize]
        }
    }

    /// Id of a single character.
    pub fn char_id(&self, c: char) -> Result<u32> {
        VOCAB_CHARS
            .chars()
            .position(|v| v == c)
            .map(|i| (i + 3) as u32)
            .ok_or(Error::UnknownChar(c))
    }

    /// Encode text characters (no specials added).
    pub fn encode(&self, text: &str) -> Result<TokenSeq> {
        let mut ids = Vec::with_capacity(text.len());
        for c in text.chars() {
            ids.push(self.char_id(c)?);
        }
        Ok(TokenSeq { ids })
    }

    /// Encode a prompt as `<bos>` followed by its characters.
    pub fn encode_prompt(&self, text: &str) -> Result<TokenSeq> {
        let mut ids = Vec::with_capacity(text.len() + 1);
        ids.push(self.bos_id);
        for c in text.chars() {
            ids.push(self.char_id(c)?);
        }
        Ok(TokenSeq { ids })
    }

    /// Encode a response as its characters followed by `<eos>`.
    pub fn encode_response(&self, text: &str) -> Result<TokenSeq> {
        let mut seq = self.encode(text)?;
        seq.ids.push(self.eos_id);
        Ok(seq)
    }

    /// Decode a sequence to text; special tokens contribute nothing.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|&id| self.token_text(id)).collect()
    }
}
