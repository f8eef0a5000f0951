//! Token vocabulary and binary bag-of-words line vectors.

use std::collections::HashMap;
use std::path::Path;

use crate::corpus::{Corpus, Program};
use crate::digest::{fnv1a64, to_hex};
use crate::error::{Error, Result};

/// Splits a line on single spaces, dropping the empty fragments left by runs of spaces.
pub fn tokenize(line: &str) -> impl Iterator<Item = &str> {
    line.split(' ').filter(|t| !t.is_empty())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from an explicit ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptyVocabulary);
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(['\n', '\r', ' ']) {
                return Err(Error::InvalidToken(t.clone()));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// N, the bag-of-words dimension.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn position(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// The vocabulary file: one token per line, each terminated by `\n`.
    pub fn to_file_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.tokens.iter().map(|t| t.len() + 1).sum());
        for t in &self.tokens {
            out.extend_from_slice(t.as_bytes());
            out.push(b'\n');
        }
        out
    }

    pub fn from_file_bytes(bytes: &[u8]) -> Result<Self> {
        let text = std::str::from_utf8(bytes)
            .map_err(|e| Error::Config(format!("vocabulary is not UTF-8: {e}")))?;
        let body = text.strip_suffix('\n').unwrap_or(text);
        if body.is_empty() {
            return Err(Error::EmptyVocabulary);
        }
        Self::from_tokens(body.split('\n').map(str::to_owned).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_file_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_bytes(&bytes)
    }

    /// FNV-1a of the vocabulary file bytes.
    pub fn digest(&self) -> u64 {
        fnv1a64(&self.to_file_bytes())
    }

    pub fn digest_hex(&self) -> String {
        to_hex(self.digest())
    }
}

/// Collects every distinct token in first-occurrence order.
pub fn build_vocabulary<'a, I>(programs: I) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a Program>,
{
    let mut tokens = Vec::new();
    let mut index = HashMap::new();
    for program in programs {
        for line in &program.lines {
            for tok in tokenize(line) {
                if !index.contains_key(tok) {
                    index.insert(tok.to_owned(), tokens.len());
                    tokens.push(tok.to_owned());
                }
            }
        }
    }
    if tokens.is_empty() {
        return Err(Error::EmptyVocabulary);
    }
    Ok(Vocabulary { tokens, index })
}

pub fn build_corpus_vocabulary(corpus: &Corpus) -> Result<Vocabulary> {
    build_vocabulary(&corpus.programs)
}

/// Sparse binary vector: the positions set to one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BowVector {
    dimension: usize,
    on_indices: Vec<usize>,
}

impl BowVector {
    /// `on_indices` are sorted and deduplicated here.
    pub fn new(dimension: usize, mut on_indices: Vec<usize>) -> Result<Self> {
        on_indices.sort_unstable();
        on_indices.dedup();
        if let Some(&last) = on_indices.last() {
            if last >= dimension {
                return Err(Error::IndexOutOfRange {
                    index: last,
                    len: dimension,
                });
            }
        }
        Ok(BowVector {
            dimension,
            on_indices,
        })
    }

    pub fn zeros(dimension: usize) -> Self {
        BowVector {
            dimension,
            on_indices: Vec::new(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn on_indices(&self) -> &[usize] {
        &self.on_indices
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dimension];
        for &i in &self.on_indices {
            v[i] = 1.0;
        }
        v
    }
}

/// Tokens missing from the vocabulary contribute nothing.
pub fn vectorize_line(vocab: &Vocabulary, line: &str) -> BowVector {
    let mut on: Vec<usize> = tokenize(line).filter_map(|t| vocab.position(t)).collect();
    on.sort_unstable();
    on.dedup();
    BowVector {
        dimension: vocab.len(),
        on_indices: on,
    }
}

pub fn vectorize_program(vocab: &Vocabulary, program: &Program) -> Vec<BowVector> {
    program
        .lines
        .iter()
        .map(|l| vectorize_line(vocab, l))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn abc() -> Vocabulary {
        Vocabulary::from_tokens(vec!["a".into(), "b".into(), "c".into()]).unwrap()
    }

    fn prog(id: &str, lines: &[&str]) -> Program {
        Program::new(id, lines.iter().map(|s| s.to_string()).collect(), 0, vec![]).unwrap()
    }

    #[test]
    fn tokenize_single_space_split() {
        let toks: Vec<_> = tokenize("store i32 0, i32* %1").collect();
        assert_eq!(toks, ["store", "i32", "0,", "i32*", "%1"]);
        assert_eq!(tokenize("").count(), 0);
        assert_eq!(tokenize("   ").count(), 0);
        let toks: Vec<_> = tokenize("  %2 = add").collect();
        assert_eq!(toks, ["%2", "=", "add"]);
        // tabs are not separators
        assert_eq!(tokenize("a\tb").collect::<Vec<_>>(), ["a\tb"]);
    }

    #[test]
    fn vocabulary_first_occurrence_order() {
        let v = build_vocabulary(&[prog("p", &["a b", "b c"])]).unwrap();
        assert_eq!(v.tokens(), ["a", "b", "c"]);
        assert_eq!(v.len(), 3);
        let v = build_vocabulary(&[prog("p", &["c a"]), prog("q", &["b a"])]).unwrap();
        assert_eq!(v.tokens(), ["c", "a", "b"]);
        assert!(matches!(
            build_vocabulary(&[prog("p", &[" "])]),
            Err(Error::EmptyVocabulary)
        ));
    }

    #[test]
    fn vectorize_presence_semantics() {
        let v = abc();
        assert_eq!(vectorize_line(&v, "c a c").on_indices(), [0, 2]);
        assert!(vectorize_line(&v, "").on_indices().is_empty());
        assert_eq!(vectorize_line(&v, "a z").on_indices(), [0]);
        assert_eq!(vectorize_line(&v, "a z").dimension(), 3);
    }

    #[test]
    fn vectorize_program_one_vector_per_line() {
        let v = abc();
        let p = prog("p", &["a", "b c", "a"]);
        let vs = vectorize_program(&v, &p);
        assert_eq!(vs.len(), 3);
        assert_eq!(vs[0], vs[2]);
    }

    #[test]
    fn file_round_trip_and_digest() {
        let v = abc();
        assert_eq!(v.to_file_bytes(), b"a\nb\nc\n");
        let back = Vocabulary::from_file_bytes(&v.to_file_bytes()).unwrap();
        assert_eq!(back, v);
        assert_eq!(v.digest_hex().len(), 16);
        assert_eq!(v.digest(), fnv1a64(b"a\nb\nc\n"));
        let other = Vocabulary::from_tokens(vec!["a".into(), "c".into(), "b".into()]).unwrap();
        assert_ne!(other.digest(), v.digest());
    }

    #[test]
    fn invalid_vocabularies_rejected() {
        assert!(Vocabulary::from_tokens(vec![]).is_err());
        assert!(Vocabulary::from_tokens(vec!["a".into(), "a".into()]).is_err());
        assert!(Vocabulary::from_tokens(vec!["a\nb".into()]).is_err());
        assert!(Vocabulary::from_file_bytes(b"").is_err());
        assert!(Vocabulary::from_file_bytes(b"a\n\nb\n").is_err());
    }

    #[test]
    fn bow_vector_validation() {
        let b = BowVector::new(4, vec![3, 1, 3]).unwrap();
        assert_eq!(b.on_indices(), [1, 3]);
        assert_eq!(b.to_dense(), [0.0, 1.0, 0.0, 1.0]);
        assert!(BowVector::new(2, vec![2]).is_err());
    }
}
