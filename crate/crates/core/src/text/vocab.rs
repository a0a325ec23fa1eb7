use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Printable characters every generated string is drawn from.
pub const BASE_ALPHABET: &str =
    "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789 .,?:;'-!";

/// Reserved tokens, in id order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(usize)]
pub enum Special {
    Pad = 0,
    Bos,
    Eos,
    Sep,
    Knowledge,
    Question,
    User,
    System,
    Safe,
    Reject,
}

impl Special {
    pub const ALL: [Special; 10] = [
        Special::Pad,
        Special::Bos,
        Special::Eos,
        Special::Sep,
        Special::Knowledge,
        Special::Question,
        Special::User,
        Special::System,
        Special::Safe,
        Special::Reject,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn marker(self) -> &'static str {
        match self {
            Special::Pad => "<PAD>",
            Special::Bos => "<BOS>",
            Special::Eos => "<EOS>",
            Special::Sep => "<SEP>",
            Special::Knowledge => "[KNOWLEDGE]",
            Special::Question => "[QUESTION]",
            Special::User => "[USER]",
            Special::System => "[SYSTEM]",
            Special::Safe => "<SAFE>",
            Special::Reject => "<REJECT>",
        }
    }
}

/// Bijective token/id table. The ten specials hold ids 0..10; every other
/// token is a single character.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    chars: HashMap<char, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::standard()
    }
}

impl Vocabulary {
    /// Specials followed by [`BASE_ALPHABET`].
    pub fn standard() -> Self {
        let tokens = Special::ALL
            .iter()
            .map(|s| s.marker().to_string())
            .chain(BASE_ALPHABET.chars().map(String::from))
            .collect();
        Self::from_tokens(tokens).expect("built-in vocabulary is valid")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in Special::ALL.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(s.marker()) {
                return Err(Error::Validation(format!(
                    "vocabulary id {i} must be {}",
                    s.marker()
                )));
            }
        }
        let mut chars = HashMap::new();
        for (id, tok) in tokens.iter().enumerate().skip(Special::ALL.len()) {
            let mut it = tok.chars();
            let (Some(c), None) = (it.next(), it.next()) else {
                return Err(Error::Validation(format!("token {id} ({tok:?}) is not a single character")));
            };
            if c == '<' || c == '[' {
                return Err(Error::Validation(format!("token {id} collides with the special-marker prefix")));
            }
            if chars.insert(c, id).is_some() {
                return Err(Error::Validation(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Self { tokens, chars })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn char_id(&self, c: char) -> Option<usize> {
        self.chars.get(&c).copied()
    }

    pub fn tokenize(&self, s: &str) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(s.len());
        let mut rest = s;
        let mut offset = 0;
        while let Some(c) = rest.chars().next() {
            let special = Special::ALL.iter().find(|sp| rest.starts_with(sp.marker()));
            let step = match (special, self.char_id(c)) {
                (Some(sp), _) => {
                    out.push(sp.id());
                    sp.marker().len()
                }
                (None, Some(id)) => {
                    out.push(id);
                    c.len_utf8()
                }
                (None, None) => return Err(Error::Vocabulary { ch: c, offset }),
            };
            rest = &rest[step..];
            offset += step;
        }
        Ok(out)
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let mut s = String::new();
        for &id in ids {
            s.push_str(self.token(id).ok_or(Error::TokenId { id, size: self.len() })?);
        }
        Ok(s)
    }

    /// One token per line; the line number is the id.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let body = text.strip_suffix('\n').unwrap_or(&text);
        Self::from_tokens(body.split('\n').map(String::from).collect())
    }
}
