//! Bag-of-words corpora in the UCI sparse triplet format, vocabularies, and
//! held-out token splits.
//!
//! A docword stream starts with three integers (documents `N`, vocabulary
//! size `D`, non-zero entries `NNZ`), each on its own line, followed by `NNZ`
//! lines `docId wordId count` with 1-based ids. Writers always emit that exact
//! layout; the reader also accepts the three header integers on one line.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::rng::derive_seed;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("vocabulary has {got} terms but the corpus declares {want}")]
    VocabSize { got: usize, want: usize },
    #[error("duplicate vocabulary term {0:?}")]
    DuplicateTerm(String),
    #[error("cannot split a document with {0} tokens")]
    TooShort(u64),
    #[error("split ratio {0} must lie in (0, 1)")]
    Ratio(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn parse_err(line: usize, msg: impl Into<String>) -> CorpusError {
    CorpusError::Parse {
        line,
        msg: msg.into(),
    }
}

/// Ordered list of unique terms; a term's index is its word id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    terms: Vec<String>,
}

impl Vocabulary {
    pub fn new(terms: Vec<String>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::with_capacity(terms.len());
        for t in &terms {
            if !seen.insert(t.as_str()) {
                return Err(CorpusError::DuplicateTerm(t.clone()));
            }
        }
        Ok(Self { terms })
    }

    /// Placeholder terms `w0, w1, …` for corpora shipped without a vocabulary.
    pub fn synthetic(size: usize) -> Self {
        Self {
            terms: (0..size).map(|i| format!("w{i}")).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn term(&self, id: usize) -> Option<&str> {
        self.terms.get(id).map(String::as_str)
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    /// One term per line, UTF-8.
    pub fn read<R: BufRead>(reader: R) -> Result<Self, CorpusError> {
        let mut terms = Vec::new();
        for line in reader.lines() {
            let line = line?;
            let term = line.trim_end_matches('\r');
            if !term.is_empty() {
                terms.push(term.to_string());
            }
        }
        Self::new(terms)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), CorpusError> {
        for t in &self.terms {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }
}

/// Sparse word counts of one document, sorted by word id.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Document {
    counts: Vec<(u32, u32)>,
    total: u64,
}

impl Document {
    /// Builds a document from `(word id, count)` pairs in any order.
    /// Repeated ids are merged and zero counts are skipped.
    pub fn from_counts<I: IntoIterator<Item = (u32, u32)>>(pairs: I) -> Self {
        let mut map = BTreeMap::new();
        for (w, c) in pairs {
            if c > 0 {
                *map.entry(w).or_insert(0u32) += c;
            }
        }
        let counts: Vec<(u32, u32)> = map.into_iter().collect();
        let total = counts.iter().map(|&(_, c)| c as u64).sum();
        Self { counts, total }
    }

    pub fn counts(&self) -> &[(u32, u32)] {
        &self.counts
    }

    /// Total number of tokens `M`.
    pub fn len(&self) -> u64 {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn num_types(&self) -> usize {
        self.counts.len()
    }

    pub fn count(&self, word: u32) -> u32 {
        self.counts
            .binary_search_by_key(&word, |&(w, _)| w)
            .map(|i| self.counts[i].1)
            .unwrap_or(0)
    }
}

/// Documents over a fixed vocabulary size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub num_words: usize,
    pub docs: Vec<Document>,
}

impl Corpus {
    pub fn new(num_words: usize, docs: Vec<Document>) -> Self {
        debug_assert!(docs
            .iter()
            .all(|d| d.counts().iter().all(|&(w, _)| (w as usize) < num_words)));
        Self { num_words, docs }
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn num_tokens(&self) -> u64 {
        self.docs.iter().map(Document::len).sum()
    }

    pub fn subset(&self, ids: &[usize]) -> Corpus {
        Corpus {
            num_words: self.num_words,
            docs: ids.iter().map(|&i| self.docs[i].clone()).collect(),
        }
    }

    /// Writes the corpus in UCI docword layout.
    pub fn write_uci<W: Write>(&self, mut w: W) -> Result<(), CorpusError> {
        let nnz: usize = self.docs.iter().map(Document::num_types).sum();
        writeln!(w, "{}", self.docs.len())?;
        writeln!(w, "{}", self.num_words)?;
        writeln!(w, "{nnz}")?;
        for (d, doc) in self.docs.iter().enumerate() {
            for &(word, count) in doc.counts() {
                writeln!(w, "{} {} {}", d + 1, word + 1, count)?;
            }
        }
        Ok(())
    }
}

/// Result of reading a UCI corpus.
#[derive(Debug, Clone)]
pub struct UciCorpus {
    pub corpus: Corpus,
    pub vocab: Vocabulary,
    /// 0-based ids (in the file's numbering) of documents without tokens.
    pub dropped: Vec<usize>,
}

fn parse_field<T: std::str::FromStr>(tok: &str, line: usize, what: &str) -> Result<T, CorpusError> {
    tok.parse()
        .map_err(|_| parse_err(line, format!("invalid {what} {tok:?}")))
}

/// Reads a UCI docword stream and, optionally, its vocabulary.
///
/// Documents that end up with no tokens are dropped from the returned corpus
/// and listed in [`UciCorpus::dropped`].
pub fn load_uci_bow<R: BufRead, V: BufRead>(
    docword: R,
    vocab: Option<V>,
) -> Result<UciCorpus, CorpusError> {
    let mut header: Vec<u64> = Vec::with_capacity(3);
    let mut header_line = 0;
    let mut lines = docword.lines().enumerate();
    while header.len() < 3 {
        let Some((i, line)) = lines.next() else {
            return Err(parse_err(header_line + 1, "truncated header"));
        };
        header_line = i;
        let line = line?;
        for tok in line.split_whitespace() {
            if header.len() == 3 {
                return Err(parse_err(i + 1, "unexpected data on header line"));
            }
            header.push(parse_field(tok, i + 1, "header value")?);
        }
    }
    let (n_docs, n_words, nnz) = (header[0] as usize, header[1] as usize, header[2] as usize);

    let mut rows: Vec<Vec<(u32, u32)>> = vec![Vec::new(); n_docs];
    let mut seen_entries = 0usize;
    let mut seen = HashSet::new();
    for (i, line) in lines {
        let line = line?;
        let lineno = i + 1;
        let mut toks = line.split_whitespace();
        let Some(first) = toks.next() else { continue };
        let doc: usize = parse_field(first, lineno, "document id")?;
        let word: usize = parse_field(
            toks.next().ok_or_else(|| parse_err(lineno, "missing word id"))?,
            lineno,
            "word id",
        )?;
        let count: i64 = parse_field(
            toks.next().ok_or_else(|| parse_err(lineno, "missing count"))?,
            lineno,
            "count",
        )?;
        if toks.next().is_some() {
            return Err(parse_err(lineno, "trailing fields"));
        }
        if doc == 0 || doc > n_docs {
            return Err(parse_err(lineno, format!("document id {doc} out of range 1..={n_docs}")));
        }
        if word == 0 || word > n_words {
            return Err(parse_err(lineno, format!("word id {word} out of range 1..={n_words}")));
        }
        if count <= 0 {
            return Err(parse_err(lineno, format!("non-positive count {count}")));
        }
        let count = u32::try_from(count).map_err(|_| parse_err(lineno, "count too large"))?;
        if !seen.insert((doc, word)) {
            return Err(parse_err(lineno, format!("duplicate entry for document {doc}, word {word}")));
        }
        rows[doc - 1].push(((word - 1) as u32, count));
        seen_entries += 1;
    }
    if seen_entries != nnz {
        return Err(parse_err(
            header_line + 1,
            format!("header declares {nnz} entries but {seen_entries} were read"),
        ));
    }

    let mut docs = Vec::with_capacity(n_docs);
    let mut dropped = Vec::new();
    for (d, row) in rows.into_iter().enumerate() {
        let doc = Document::from_counts(row);
        if doc.is_empty() {
            dropped.push(d);
        } else {
            docs.push(doc);
        }
    }
    if !dropped.is_empty() {
        log::warn!("dropped {} documents without tokens", dropped.len());
    }

    let vocab = match vocab {
        Some(r) => {
            let v = Vocabulary::read(r)?;
            if v.len() != n_words {
                return Err(CorpusError::VocabSize {
                    got: v.len(),
                    want: n_words,
                });
            }
            v
        }
        None => Vocabulary::synthetic(n_words),
    };
    Ok(UciCorpus {
        corpus: Corpus::new(n_words, docs),
        vocab,
        dropped,
    })
}

/// Train/test partition of one document's tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeldoutSplit {
    pub train: Document,
    pub test: Document,
    pub seed: u64,
}

/// Moves `max(1, floor(ratio · M))` tokens, drawn without replacement from the
/// document's token multiset, into the test side.
pub fn split_heldout(doc: &Document, ratio: f64, seed: u64) -> Result<HeldoutSplit, CorpusError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CorpusError::Ratio(ratio));
    }
    let m = doc.len();
    if m < 2 {
        return Err(CorpusError::TooShort(m));
    }
    let n_test = ((ratio * m as f64).floor() as u64).max(1) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Token positions are laid out word by word in id order.
    let mut picked = index::sample(&mut rng, m as usize, n_test).into_vec();
    picked.sort_unstable();

    let mut test_counts = Vec::new();
    let mut cursor = 0usize;
    let mut start = 0usize;
    for &(word, count) in doc.counts() {
        let end = start + count as usize;
        let mut taken = 0u32;
        while cursor < picked.len() && picked[cursor] < end {
            taken += 1;
            cursor += 1;
        }
        if taken > 0 {
            test_counts.push((word, taken));
        }
        start = end;
    }
    let test = Document::from_counts(test_counts);
    let train = Document::from_counts(
        doc.counts()
            .iter()
            .map(|&(w, c)| (w, c - test.count(w))),
    );
    Ok(HeldoutSplit { train, test, seed })
}

/// Splits every document of a corpus with per-document seeds derived from
/// `seed`.
pub fn split_corpus(corpus: &Corpus, ratio: f64, seed: u64) -> Result<Vec<HeldoutSplit>, CorpusError> {
    corpus
        .docs
        .iter()
        .enumerate()
        .map(|(i, d)| split_heldout(d, ratio, derive_seed(seed, &[i as u64])))
        .collect()
}

/// Encoder input: `ln(1 + count)` per word, zero elsewhere.
pub fn doc_features(doc: &Document, num_words: usize) -> Vec<f64> {
    let mut out = vec![0.0; num_words];
    write_features(doc, &mut out);
    out
}

pub(crate) fn write_features(doc: &Document, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for &(w, c) in doc.counts() {
        out[w as usize] = (c as f64).ln_1p();
    }
}
