//! Word-level vocabulary with whole-phrase class tokens.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const SEP: &str = "<sep>";
pub const BEGIN_ANSWER: &str = "<ans>";
pub const EOS: &str = "<eos>";

const PUNCTUATION: [char; 3] = [',', '.', ':'];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    class_ids: Vec<usize>,
    /// Longest token measured in whitespace-separated words.
    max_words: usize,
}

impl Vocab {
    /// Builds the vocabulary for one task: special tokens, the prompt
    /// template words, the task name words and one token per class name.
    pub fn for_task(task: &str, classes: &[String]) -> Result<Self> {
        let mut tokens: Vec<String> = [UNK, SEP, BEGIN_ANSWER, EOS].map(String::from).to_vec();
        let mut words: Vec<String> = split_words(super::prompt::PROMPT_PREFIX);
        words.extend(split_words(super::prompt::PROMPT_SUFFIX));
        words.extend(split_words(task));
        words.extend(PUNCTUATION.iter().map(|c| c.to_string()));
        tokens.extend(words);
        let mut seen_class = std::collections::HashSet::new();
        for c in classes {
            let name = normalize_ws(c);
            if name.is_empty() {
                return Err(Error::Parameter("empty class name".into()));
            }
            if !seen_class.insert(name.clone()) {
                return Err(Error::Label(format!("duplicate class name `{c}`")));
            }
            tokens.push(name);
        }
        let mut v = Self::from_tokens(dedup(tokens))?;
        v.class_ids = classes.iter().map(|c| v.index[&normalize_ws(c)]).collect();
        Ok(v)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Parameter(format!("empty token at line {i}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Parameter(format!("duplicate token `{t}`")));
            }
        }
        for special in [UNK, SEP, BEGIN_ANSWER, EOS] {
            if !index.contains_key(special) {
                return Err(Error::Parameter(format!("vocab lacks `{special}`")));
            }
        }
        let max_words = tokens.iter().map(|t| t.split(' ').count()).max().unwrap_or(1);
        Ok(Self {
            tokens,
            index,
            class_ids: Vec::new(),
            max_words,
        })
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

    pub fn unk(&self) -> usize {
        self.index[UNK]
    }

    pub fn sep(&self) -> usize {
        self.index[SEP]
    }

    pub fn begin_answer(&self) -> usize {
        self.index[BEGIN_ANSWER]
    }

    pub fn eos(&self) -> usize {
        self.index[EOS]
    }

    /// Token id of each class, in dataset class order.
    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    /// Greedy longest match over whitespace-separated words; unmatched words
    /// become `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let words = split_words(text);
        let mut ids = Vec::with_capacity(words.len());
        let mut i = 0;
        while i < words.len() {
            let longest = (1..=self.max_words.min(words.len() - i))
                .rev()
                .find_map(|n| self.id(&words[i..i + n].join(" ")).map(|id| (n, id)));
            match longest {
                Some((n, id)) => {
                    ids.push(id);
                    i += n;
                }
                None => {
                    ids.push(self.unk());
                    i += 1;
                }
            }
        }
        ids
    }

    /// Joins tokens with single spaces, attaching punctuation to the
    /// preceding word.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id).unwrap_or(UNK);
            let is_punct = tok.len() == 1 && tok.chars().all(|c| PUNCTUATION.contains(&c));
            if !out.is_empty() && !is_punct {
                out.push(' ');
            }
            out.push_str(tok);
        }
        out
    }

    /// One token per line; line number is the id.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Reads a vocab file; `classes` re-derives the class token ids.
    pub fn read(path: &Path, classes: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut v = Self::from_tokens(text.lines().map(String::from).collect())?;
        v.class_ids = classes
            .iter()
            .map(|c| {
                v.id(&normalize_ws(c))
                    .ok_or_else(|| Error::Label(format!("class `{c}` missing from vocab")))
            })
            .collect::<Result<_>>()?;
        Ok(v)
    }
}

fn dedup(tokens: Vec<String>) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    tokens.into_iter().filter(|t| seen.insert(t.clone())).collect()
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Splits on whitespace and peels trailing `, . :` into separate words.
pub(crate) fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let core = raw.trim_end_matches(PUNCTUATION);
        if !core.is_empty() {
            out.push(core.to_string());
        }
        out.extend(raw[core.len()..].chars().map(|c| c.to_string()));
    }
    out
}
