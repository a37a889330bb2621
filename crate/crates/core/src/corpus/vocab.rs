use std::collections::HashMap;

use super::CorpusError;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// Bottleneck token, repeated once per `Z` slot.
pub const BNK: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<bnk>"];

/// Punctuation that is split off words during tokenization.
const PUNCT: [char; 5] = ['(', ')', '?', '.', ','];

/// Word-level closed vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIALS {
            v.insert(s);
        }
        v
    }

    /// Builds a vocabulary from a token list whose first entries are the
    /// specials.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, CorpusError> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(CorpusError::InvalidParameter(
                "vocabulary must start with the special tokens".into(),
            ));
        }
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in &tokens {
            if v.index.contains_key(t) {
                return Err(CorpusError::InvalidParameter(format!(
                    "duplicate token {t:?}"
                )));
            }
            v.insert(t);
        }
        Ok(v)
    }

    /// Adds `token` if absent and returns its id.
    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIALS.len()
    }

    /// Splits on whitespace and peels punctuation off word edges.
    pub fn split(text: &str) -> Vec<&str> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            let mut w = word;
            let mut trailing = Vec::new();
            while let Some(c) = w.chars().next().filter(|c| PUNCT.contains(c)) {
                out.push(&w[..c.len_utf8()]);
                w = &w[c.len_utf8()..];
            }
            while let Some(c) = w.chars().last().filter(|c| PUNCT.contains(c)) {
                let cut = w.len() - c.len_utf8();
                trailing.push(&w[cut..]);
                w = &w[..cut];
            }
            if !w.is_empty() {
                out.push(w);
            }
            out.extend(trailing.into_iter().rev());
        }
        out
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>, CorpusError> {
        Self::split(text)
            .into_iter()
            .map(|t| {
                self.id(t)
                    .ok_or_else(|| CorpusError::UnknownToken(t.to_string()))
            })
            .collect()
    }

    /// Inverse of [`encode`](Self::encode) for text produced by the
    /// generators: `(` binds right, `) ? . ,` bind left.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        let mut glue_next = true;
        for &id in ids {
            let tok = self.token(id).unwrap_or("<unk>");
            let binds_left = matches!(tok, ")" | "?" | "." | ",");
            if !glue_next && !binds_left {
                out.push(' ');
            }
            out.push_str(tok);
            glue_next = tok == "(";
        }
        out
    }
}
