//! First-stage lexical retrieval: an inverted index over word-normalized
//! text, scored with Okapi BM25, producing the candidate lists the neural
//! re-ranker consumes.
//!
//! Tokenization reuses [`normalize_words`], so the sparse index and the
//! subword pipeline agree on word boundaries, but no subword splitting
//! happens here. No stemming, no stopword removal: the first stage stays
//! reproducible and order-free of any language resource.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DocStore;
use crate::error::RetrievalError;
use crate::tokenizer::normalize_words;

/// Candidate depth used when no explicit cutoff is given.
pub const DEFAULT_TOP_K: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

/// One posting: document ordinal and term frequency.
type Posting = (u32, u32);

/// Inverted index over a document store. Ordinals are ranks in the sorted
/// docid list, so ascending ordinal is ascending docid; postings are stored
/// by ordinal and therefore sorted by docid with no duplicates.
#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    postings: BTreeMap<String, Vec<Posting>>,
    docids: Vec<String>,
    doc_len: Vec<u32>,
    avglen: f64,
}

impl InvertedIndex {
    /// Tokenize and count every document. Counting fans out across threads;
    /// the merge walks documents in ascending docid order, so the result is
    /// identical to a serial build.
    pub fn build(docs: &DocStore) -> Result<InvertedIndex, RetrievalError> {
        if docs.is_empty() {
            return Err(RetrievalError::EmptyStore);
        }
        let mut docids: Vec<String> = docs.ids().to_vec();
        docids.sort_unstable();

        let counted: Vec<(Vec<(String, u32)>, u32)> = docids
            .par_iter()
            .map(|docid| {
                let words = normalize_words(docs.get(docid).expect("docid from this store"));
                let mut counts: BTreeMap<String, u32> = BTreeMap::new();
                for w in &words {
                    *counts.entry(w.clone()).or_insert(0) += 1;
                }
                (counts.into_iter().collect(), words.len() as u32)
            })
            .collect();

        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_len = Vec::with_capacity(docids.len());
        for (ord, (counts, len)) in counted.into_iter().enumerate() {
            doc_len.push(len);
            for (term, tf) in counts {
                postings.entry(term).or_default().push((ord as u32, tf));
            }
        }
        let avglen = doc_len.iter().map(|&l| l as f64).sum::<f64>() / doc_len.len() as f64;
        Ok(InvertedIndex { postings, docids, doc_len, avglen })
    }

    pub fn n_docs(&self) -> usize {
        self.docids.len()
    }

    pub fn avglen(&self) -> f64 {
        self.avglen
    }

    pub fn docids(&self) -> &[String] {
        &self.docids
    }

    /// Number of documents containing `term`; 0 for unseen terms.
    pub fn df(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn doc_len(&self, docid: &str) -> Result<u32, RetrievalError> {
        Ok(self.doc_len[self.ordinal(docid)? as usize])
    }

    fn ordinal(&self, docid: &str) -> Result<u32, RetrievalError> {
        self.docids
            .binary_search_by(|d| d.as_str().cmp(docid))
            .map(|i| i as u32)
            .map_err(|_| RetrievalError::UnknownDocId(docid.to_string()))
    }

    /// ln(1 + (N - df + 0.5)/(df + 0.5)): strictly positive even when a term
    /// appears in more than half the collection, so scores never go negative.
    fn idf(&self, df: usize) -> f64 {
        let n = self.n_docs() as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn tf_part(&self, tf: u32, len: u32, p: &Bm25Params) -> f64 {
        let tf = tf as f64;
        let norm = 1.0 - p.b + p.b * (len as f64) / self.avglen;
        tf * (p.k1 + 1.0) / (tf + p.k1 * norm)
    }

    /// BM25 score of one document against the given query terms. Each term
    /// instance contributes independently, so repeating a term doubles its
    /// contribution; terms absent from the document (or collection) add 0.
    pub fn bm25_score(
        &self,
        query_terms: &[String],
        docid: &str,
        params: &Bm25Params,
    ) -> Result<f64, RetrievalError> {
        let ord = self.ordinal(docid)?;
        let len = self.doc_len[ord as usize];
        let mut score = 0.0;
        for term in query_terms {
            let Some(list) = self.postings.get(term) else { continue };
            let Ok(i) = list.binary_search_by_key(&ord, |&(d, _)| d) else { continue };
            score += self.idf(list.len()) * self.tf_part(list[i].1, len, params);
        }
        Ok(score)
    }

    /// Top-`k` documents for a raw query string, sorted by descending score
    /// with ties broken by ascending docid. Documents matching no query term
    /// are excluded, so the list may be shorter than `k`.
    ///
    /// Accumulation visits query terms in order and each posting list only
    /// once per term instance; per-document sums therefore add the same
    /// floats in the same order as [`Self::bm25_score`].
    pub fn search(&self, query: &str, k: usize, params: &Bm25Params) -> Vec<(String, f64)> {
        let terms = normalize_words(query);
        let mut scores = vec![0.0f64; self.docids.len()];
        let mut touched = vec![false; self.docids.len()];
        for term in &terms {
            let Some(list) = self.postings.get(term) else { continue };
            let idf = self.idf(list.len());
            for &(ord, tf) in list {
                scores[ord as usize] += idf * self.tf_part(tf, self.doc_len[ord as usize], params);
                touched[ord as usize] = true;
            }
        }
        let mut hits: Vec<(u32, f64)> = (0..self.docids.len() as u32)
            .filter(|&ord| touched[ord as usize] && scores[ord as usize] > 0.0)
            .map(|ord| (ord, scores[ord as usize]))
            .collect();
        // Ascending ordinal is ascending docid, so a stable sort on the
        // score alone leaves ties in docid order.
        hits.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("scores are finite"));
        hits.truncate(k);
        hits.into_iter()
            .map(|(ord, s)| (self.docids[ord as usize].clone(), s))
            .collect()
    }
}

const MAGIC: &[u8; 4] = b"CTIX";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TermEntry {
    term: String,
    /// Byte offset of this term's postings in the data section.
    offset: u64,
    /// Number of postings (the document frequency).
    df: u32,
}

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    n_docs: usize,
    avglen: f64,
    docids: Vec<String>,
    doc_len: Vec<u32>,
    terms: Vec<TermEntry>,
}

fn format_err(msg: impl Into<String>) -> RetrievalError {
    RetrievalError::Format(msg.into())
}

fn push_varint(out: &mut Vec<u8>, mut v: u32) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            break;
        }
        out.push(byte | 0x80);
    }
}

fn read_varint(data: &[u8], pos: &mut usize) -> Result<u32, RetrievalError> {
    let mut v: u32 = 0;
    for shift in (0..=28).step_by(7) {
        let &byte = data.get(*pos).ok_or_else(|| format_err("truncated varint"))?;
        *pos += 1;
        v |= ((byte & 0x7f) as u32) << shift;
        if byte & 0x80 == 0 {
            if shift == 28 && byte > 0x0f {
                return Err(format_err("varint overflows u32"));
            }
            return Ok(v);
        }
    }
    Err(format_err("varint longer than 5 bytes"))
}

/// Layout: magic `CTIX`, little-endian u32 version, u64 header length, a
/// UTF-8 JSON header (counts, docids, lengths, term dictionary with offsets),
/// then per term the postings as varints: delta-encoded ordinals (first
/// ordinal absolute) interleaved with term frequencies.
pub fn save_index(index: &InvertedIndex, path: &Path) -> Result<(), RetrievalError> {
    let mut data = Vec::new();
    let mut terms = Vec::with_capacity(index.postings.len());
    for (term, list) in &index.postings {
        terms.push(TermEntry {
            term: term.clone(),
            offset: data.len() as u64,
            df: list.len() as u32,
        });
        let mut prev = 0u32;
        for &(ord, tf) in list {
            push_varint(&mut data, ord - prev);
            push_varint(&mut data, tf);
            prev = ord;
        }
    }
    let header = IndexHeader {
        n_docs: index.docids.len(),
        avglen: index.avglen,
        docids: index.docids.clone(),
        doc_len: index.doc_len.clone(),
        terms,
    };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| format_err(e.to_string()))?;

    let mut out = Vec::with_capacity(16 + header_bytes.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&data);
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_index(path: &Path) -> Result<InvertedIndex, RetrievalError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 {
        return Err(format_err("file shorter than the fixed preamble"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(format_err("bad magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}, expected {VERSION}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let data_start = 16usize
        .checked_add(header_len)
        .filter(|&end| bytes.len() >= end)
        .ok_or_else(|| format_err("truncated header"))?;
    let header: IndexHeader = serde_json::from_slice(&bytes[16..data_start])
        .map_err(|e| format_err(format!("header: {e}")))?;
    if header.docids.len() != header.n_docs || header.doc_len.len() != header.n_docs {
        return Err(format_err("docid and length tables disagree with n_docs"));
    }
    if header.docids.windows(2).any(|w| w[0] >= w[1]) {
        return Err(format_err("docids not strictly ascending"));
    }

    let data = &bytes[data_start..];
    let mut postings = BTreeMap::new();
    let mut pos = 0usize;
    for entry in &header.terms {
        if entry.offset as usize != pos {
            return Err(format_err(format!(
                "term {:?} at offset {}, expected {pos}",
                entry.term, entry.offset
            )));
        }
        let mut list = Vec::with_capacity(entry.df as usize);
        let mut prev = 0u32;
        for i in 0..entry.df {
            let delta = read_varint(data, &mut pos)?;
            let tf = read_varint(data, &mut pos)?;
            let ord = prev
                .checked_add(delta)
                .filter(|&o| (o as usize) < header.n_docs)
                .ok_or_else(|| format_err(format!("ordinal out of range in term {:?}", entry.term)))?;
            if i > 0 && delta == 0 {
                return Err(format_err(format!("duplicate posting in term {:?}", entry.term)));
            }
            list.push((ord, tf));
            prev = ord;
        }
        if postings.insert(entry.term.clone(), list).is_some() {
            return Err(format_err(format!("duplicate term {:?}", entry.term)));
        }
    }
    if pos != data.len() {
        return Err(format_err(format!("{} trailing bytes after the last posting", data.len() - pos)));
    }
    Ok(InvertedIndex {
        postings,
        docids: header.docids,
        doc_len: header.doc_len,
        avglen: header.avglen,
    })
}
