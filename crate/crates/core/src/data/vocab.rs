use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

/// Words always present in the base vocabulary: template and prompt words,
/// the rare instance token, artifact names and the scene tags used by the
/// synthetic corpora.
pub const RESERVED_WORDS: &[&str] = &[
    "a", "photo", "of", "picture", "art", "by", "bridge", "beike", "coral_shell_bridge", "aki",
    "arch", "truss", "suspension", "cable", "stone", "steel", "no", "humans", "outdoors", "cloud",
    "scenery", "sky", "car", "tree", "day", "road", "building", "water", "reflection", "river",
    "mountain", "night", "sunset", "grass", "city", "shell", "coral", "style", "the", "core",
    "in", "on", "with", "and",
];

/// Whole-word vocabulary. Ids below `base_size` are frozen once built;
/// placeholder words are appended after them.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    base_size: usize,
    index: HashMap<String, u32>,
}

fn split_words(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| c == ',' || c.is_whitespace()).filter(|w| !w.is_empty())
}

impl Vocab {
    pub const PAD_ID: u32 = 0;
    pub const BOS_ID: u32 = 1;
    pub const EOS_ID: u32 = 2;

    /// Specials, then caption words in first-seen order, then reserved words,
    /// then `<unused_i>` filler up to `min_base` entries.
    pub fn build<'a>(
        captions: impl IntoIterator<Item = &'a [String]>,
        reserved: &[&str],
        min_base: usize,
    ) -> Result<Self> {
        let mut v = Vocab {
            tokens: Vec::new(),
            base_size: 0,
            index: HashMap::new(),
        };
        for s in [PAD, BOS, EOS] {
            v.push(s);
        }
        let mut any = false;
        for caption in captions {
            for tag in caption {
                any = true;
                for w in split_words(&tag.to_lowercase()) {
                    v.push(w);
                }
            }
        }
        if !any {
            return Err(Error::invalid("vocabulary needs at least one caption tag"));
        }
        for w in reserved {
            v.push(&w.to_lowercase());
        }
        let mut i = 0;
        while v.tokens.len() < min_base {
            v.push(&format!("<unused_{i}>"));
            i += 1;
        }
        v.base_size = v.tokens.len();
        Ok(v)
    }

    fn push(&mut self, w: &str) {
        if !self.index.contains_key(w) {
            self.index.insert(w.to_string(), self.tokens.len() as u32);
            self.tokens.push(w.to_string());
        }
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn from_tokens(tokens: Vec<String>, base_size: usize) -> Result<Self> {
        if base_size < 3 || base_size > tokens.len() || tokens[..3] != [PAD, BOS, EOS] {
            return Err(Error::invalid("vocabulary token list is malformed"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self {
            tokens,
            base_size,
            index,
        })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn base_size(&self) -> usize {
        self.base_size
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn placeholders(&self) -> &[String] {
        &self.tokens[self.base_size..]
    }

    /// Appends a placeholder word and returns its id.
    pub fn add_placeholder(&mut self, word: &str) -> Result<u32> {
        let word = word.trim().to_lowercase();
        if word.is_empty() || word.contains(',') {
            return Err(Error::invalid(format!("invalid placeholder `{word}`")));
        }
        if self.index.contains_key(&word) {
            return Err(Error::invalid(format!("placeholder `{word}` already in vocabulary")));
        }
        self.push(&word);
        Ok(self.tokens.len() as u32 - 1)
    }

    /// Prompt to words: placeholders are matched greedily as whole units,
    /// everything else is split on commas and whitespace.
    fn words<'p>(&self, prompt: &'p str) -> Vec<&'p str> {
        let mut placeholders: Vec<&str> = self.placeholders().iter().map(String::as_str).collect();
        placeholders.sort_by_key(|p| std::cmp::Reverse(p.len()));
        let mut out = Vec::new();
        let mut start = 0;
        let mut i = 0;
        while i < prompt.len() {
            if let Some(p) = placeholders.iter().find(|p| prompt[i..].starts_with(**p)) {
                out.extend(split_words(&prompt[start..i]));
                out.push(&prompt[i..i + p.len()]);
                i += p.len();
                start = i;
            } else {
                i += prompt[i..].chars().next().map_or(1, char::len_utf8);
            }
        }
        out.extend(split_words(&prompt[start..]));
        out
    }

    /// `[bos, ids.., eos, pad..]` of length `max_len`; content beyond
    /// `max_len - 2` words is truncated.
    pub fn tokenize(&self, prompt: &str, max_len: usize) -> Result<Vec<u32>> {
        if max_len < 2 {
            return Err(Error::invalid("token length must be at least 2"));
        }
        let lowered = prompt.to_lowercase();
        let mut ids = vec![Self::BOS_ID];
        for w in self.words(&lowered) {
            let id = self.id(w).ok_or_else(|| Error::UnknownToken(w.to_string()))?;
            if ids.len() < max_len - 1 {
                ids.push(id);
            }
        }
        ids.push(Self::EOS_ID);
        ids.resize(max_len, Self::PAD_ID);
        Ok(ids)
    }

    /// Inverse of [`Vocab::tokenize`] up to normalization.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| i > Self::EOS_ID)
            .filter_map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Index of the end token in a tokenized sequence.
    pub fn eos_position(ids: &[u32]) -> usize {
        ids.iter().position(|&i| i == Self::EOS_ID).unwrap_or(ids.len() - 1)
    }
}

/// Lowercased words of `prompt` joined by single spaces, keeping the given
/// placeholders intact.
pub fn normalize_prompt(vocab: &Vocab, prompt: &str) -> String {
    vocab.words(&prompt.to_lowercase()).join(" ")
}
