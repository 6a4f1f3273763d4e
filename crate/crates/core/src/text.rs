//! Word-level vocabulary, tokenisation and token embedding.

use std::collections::HashMap;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Lowercased word tokens; every non-alphanumeric, non-space character is a
/// token of its own.
pub fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() && !ch.is_control() {
                out.push(ch.to_lowercase().collect());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Newline-delimited tokens, id order.
    pub fn to_lines(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_lines(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_owned).collect();
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(Error::Invalid(format!(
                "vocabulary must start with {PAD_TOKEN} and {UNK_TOKEN}"
            )));
        }
        let vocab = Self::from_tokens(tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::Invalid("duplicate vocabulary entries".into()));
        }
        if let Some(bad) = vocab
            .tokens
            .iter()
            .skip(2)
            .find(|t| t.is_empty() || t.chars().any(char::is_whitespace))
        {
            return Err(Error::Invalid(format!("malformed vocabulary token {bad:?}")));
        }
        Ok(vocab)
    }
}

/// Keeps tokens seen at least `min_freq` times, ordered by frequency
/// descending then token ascending. Ids 0 and 1 are PAD and UNK.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], min_freq: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::Invalid("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for doc in corpus {
        for w in words(doc.as_ref()) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_freq.max(1) && t != PAD_TOKEN && t != UNK_TOKEN)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens = vec![PAD_TOKEN.to_owned(), UNK_TOKEN.to_owned()];
    tokens.extend(kept.into_iter().map(|(t, _)| t));
    Ok(Vocab::from_tokens(tokens))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokens {
    pub ids: Vec<usize>,
    /// True for real tokens, false for padding.
    pub mask: Vec<bool>,
}

/// Truncates or pads to exactly `max_len` ids.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Tokens {
    let mut ids: Vec<usize> = words(text)
        .iter()
        .take(max_len)
        .map(|w| vocab.id(w))
        .collect();
    let mut mask = vec![true; ids.len()];
    ids.resize(max_len, PAD);
    mask.resize(max_len, false);
    Tokens { ids, mask }
}

/// `[B, L]` id matrix with its padding mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextBatch {
    pub ids: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
}

impl TextBatch {
    pub fn from_texts<S: AsRef<str>>(texts: &[S], vocab: &Vocab, max_len: usize) -> Self {
        let (ids, mask) = texts
            .iter()
            .map(|t| {
                let tok = tokenize(t.as_ref(), vocab, max_len);
                (tok.ids, tok.mask)
            })
            .unzip();
        Self { ids, mask }
    }
}

/// Eager lookup: `[B, L, d]` rows of `table`.
pub fn embed_tokens(batch: &TextBatch, table: &Tensor) -> Result<Tensor> {
    let &[vocab, d] = table.shape() else {
        return Err(Error::Invalid(format!("embedding table must be 2-D, got {:?}", table.shape())));
    };
    let b = batch.ids.len();
    let l = batch.ids.first().map_or(0, Vec::len);
    if b == 0 || l == 0 || batch.ids.iter().any(|r| r.len() != l) {
        return Err(Error::Invalid("text batch must be a non-empty rectangle".into()));
    }
    let mut out = Vec::with_capacity(b * l * d);
    for &id in batch.ids.iter().flatten() {
        if id >= vocab {
            return Err(Error::Invalid(format!("token id {id} out of range for vocabulary of {vocab}")));
        }
        out.extend_from_slice(table.row(id));
    }
    Tensor::new(&[b, l, d], out)
}

/// Graph version for one sequence: embedding lookup plus learned positions.
pub fn embed_sequence(g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Var> {
    let table = g.param(store, "text.embed")?;
    let tokens = g.gather(table, ids)?;
    let pos = g.param(store, "text.pos")?;
    let pos = g.slice_rows(pos, 0, ids.len())?;
    g.add(tokens, pos)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_hand_count() {
        let v = build_vocab(&["a a b"], 1).unwrap();
        assert_eq!(v.tokens(), &["[PAD]", "[UNK]", "a", "b"]);
        let v = build_vocab(&["a a b"], 3).unwrap();
        assert_eq!(v.tokens(), &["[PAD]", "[UNK]"]);
        assert!(build_vocab::<&str>(&[], 1).is_err());
    }

    #[test]
    fn vocab_is_order_independent() {
        let a = build_vocab(&["the cat sat", "a dog, the end"], 1).unwrap();
        let b = build_vocab(&["a dog, the end", "the cat sat"], 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.token(2), Some("the"));
    }

    #[test]
    fn punctuation_splits_and_lowercases() {
        assert_eq!(words("Hello, World!"), vec!["hello", ",", "world", "!"]);
    }

    #[test]
    fn tokenize_cases() {
        let v = build_vocab(&["happy smiling person"], 1).unwrap();
        let t = tokenize("", &v, 3);
        assert_eq!(t.ids, vec![PAD; 3]);
        assert_eq!(t.mask, vec![false; 3]);

        let t = tokenize("smiling person", &v, 4);
        assert_eq!(t.ids, vec![v.id("smiling"), v.id("person"), PAD, PAD]);
        assert_eq!(t.mask, vec![true, true, false, false]);

        let t = tokenize("happy zebra", &v, 2);
        assert_eq!(t.ids[1], UNK);

        let t = tokenize("happy happy happy happy", &v, 2);
        assert_eq!(t.mask, vec![true, true]);
    }

    #[test]
    fn mask_false_exactly_at_pad() {
        let v = build_vocab(&["x y z"], 1).unwrap();
        let batch = TextBatch::from_texts(&["x y", "z", ""], &v, 4);
        for (ids, mask) in batch.ids.iter().zip(&batch.mask) {
            for (id, m) in ids.iter().zip(mask) {
                assert_eq!(*id == PAD, !m);
            }
        }
    }

    #[test]
    fn embed_lookup() {
        let v = build_vocab(&["p q"], 1).unwrap();
        let table = Tensor::new(&[4, 2], vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5]).unwrap();
        let batch = TextBatch::from_texts(&["q"], &v, 2);
        let e = embed_tokens(&batch, &table).unwrap();
        assert_eq!(e.shape(), &[1, 2, 2]);
        assert_eq!(&e.data()[..2], table.row(v.id("q")));
        assert_eq!(&e.data()[2..], table.row(PAD));

        let zero = embed_tokens(&batch, &Tensor::zeros(&[4, 2])).unwrap();
        assert!(zero.data().iter().all(|&x| x == 0.0));

        let bad = TextBatch {
            ids: vec![vec![9]],
            mask: vec![vec![true]],
        };
        assert!(embed_tokens(&bad, &table).is_err());
    }

    #[test]
    fn vocab_lines_round_trip() {
        let v = build_vocab(&["b a a , c"], 1).unwrap();
        assert_eq!(Vocab::from_lines(&v.to_lines()).unwrap(), v);
        assert!(Vocab::from_lines("a\nb\n").is_err());
        assert!(Vocab::from_lines("[PAD]\n[UNK]\nx\nx\n").is_err());
    }
}
