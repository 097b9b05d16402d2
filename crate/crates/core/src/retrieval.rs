//! Exact vector store, top-K search and NDCG@10 evaluation.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hidden_states::{ByteReader, Qrels};
use crate::tensor::l2_norm;
use crate::training::Similarity;

/// Immutable set of id-tagged `f32` vectors searched by brute force.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorStore {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    similarity: Similarity,
    /// Norms of stored rows, used for cosine scoring.
    norms: Vec<f64>,
}

impl VectorStore {
    /// Builds a store from `(id, vector)` pairs. An empty input yields an
    /// empty store of dimension 0.
    pub fn build<I, S, V>(items: I, similarity: Similarity) -> Result<Self>
    where
        I: IntoIterator<Item = (S, V)>,
        S: Into<String>,
        V: AsRef<[f32]>,
    {
        let mut dim = None;
        let mut ids = Vec::new();
        let mut data = Vec::new();
        let mut seen = HashSet::new();
        for (id, v) in items {
            let id = id.into();
            let v = v.as_ref();
            match dim {
                None => dim = Some(v.len()),
                Some(d) if d != v.len() => {
                    return Err(Error::Data(format!(
                        "vector {id:?} has dimension {}, expected {d}",
                        v.len()
                    )))
                }
                _ => {}
            }
            if !seen.insert(id.clone()) {
                return Err(Error::Data(format!("duplicate id {id:?} in vector store")));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Data(format!("vector {id:?} has non-finite values")));
            }
            ids.push(id);
            data.extend_from_slice(v);
        }
        let dim = dim.unwrap_or(0);
        let norms = data
            .chunks(dim.max(1))
            .take(ids.len())
            .map(|row| row.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt())
            .collect();
        Ok(Self {
            dim,
            ids,
            data,
            similarity,
            norms,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn similarity(&self) -> Similarity {
        self.similarity
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), self.row(i)))
    }

    /// Score of `query` against stored row `i`.
    pub fn score(&self, query: &[f64], query_norm: f64, i: usize) -> f64 {
        let s: f64 = self.row(i).iter().zip(query).map(|(&a, &b)| a as f64 * b).sum();
        match self.similarity {
            Similarity::Dot => s,
            Similarity::Cosine => {
                let n = self.norms[i] * query_norm;
                if n == 0.0 {
                    0.0
                } else {
                    s / n
                }
            }
        }
    }
}

/// Descending `(passage_id, score)` list.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: String,
    pub hits: Vec<(String, f64)>,
}

/// Orders hits best-first: higher score, then smaller id.
fn better(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

struct HeapEntry<'a> {
    score: f64,
    id: &'a str,
    index: usize,
}

impl PartialEq for HeapEntry<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapEntry<'_> {}
impl PartialOrd for HeapEntry<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry<'_> {
    // max-heap on "worse", so the root is the weakest kept hit
    fn cmp(&self, other: &Self) -> Ordering {
        better((self.score, self.id), (other.score, other.id))
    }
}

/// Exact top-`k` by the store's similarity; ties go to the smaller id.
pub fn top_k(query_id: &str, query: &[f64], store: &VectorStore, k: usize) -> Result<RankedList> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if store.is_empty() {
        return Ok(RankedList {
            query_id: query_id.to_string(),
            hits: Vec::new(),
        });
    }
    if query.len() != store.dim {
        return Err(Error::Data(format!(
            "query {query_id:?} has dimension {}, store has {}",
            query.len(),
            store.dim
        )));
    }
    let qn = l2_norm(query);
    if store.similarity == Similarity::Cosine && qn == 0.0 {
        return Err(Error::numeric(format!("query {query_id:?}"), "zero vector under cosine similarity"));
    }
    let mut heap: BinaryHeap<HeapEntry> = BinaryHeap::with_capacity(k + 1);
    for (i, id) in store.ids.iter().enumerate() {
        let entry = HeapEntry {
            score: store.score(query, qn, i),
            id,
            index: i,
        };
        if heap.len() < k {
            heap.push(entry);
        } else if let Some(worst) = heap.peek() {
            if better((entry.score, entry.id), (worst.score, worst.id)) == Ordering::Less {
                heap.pop();
                heap.push(entry);
            }
        }
    }
    let mut kept = heap.into_vec();
    kept.sort_by(|a, b| better((a.score, a.id), (b.score, b.id)));
    Ok(RankedList {
        query_id: query_id.to_string(),
        hits: kept
            .into_iter()
            .map(|e| (store.ids[e.index].clone(), e.score))
            .collect(),
    })
}

/// NDCG@10 with gain `2^rel − 1` and discount `log2(rank + 1)`.
/// Unjudged passages have grade 0. Returns 0 when nothing is relevant.
pub fn ndcg_at_10(ranked: &RankedList, judgments: Option<&std::collections::BTreeMap<String, u32>>) -> f64 {
    ndcg_at(ranked, judgments, 10)
}

pub fn ndcg_at(
    ranked: &RankedList,
    judgments: Option<&std::collections::BTreeMap<String, u32>>,
    cutoff: usize,
) -> f64 {
    let Some(judgments) = judgments else {
        return 0.0;
    };
    let gain = |g: u32| 2f64.powi(g as i32) - 1.0;
    let discount = |i: usize| (i as f64 + 2.0).log2();
    let dcg: f64 = ranked
        .hits
        .iter()
        .take(cutoff)
        .enumerate()
        .map(|(i, (id, _))| gain(judgments.get(id).copied().unwrap_or(0)) / discount(i))
        .sum();
    let mut ideal: Vec<u32> = judgments.values().copied().filter(|&g| g > 0).collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(cutoff)
        .enumerate()
        .map(|(i, &g)| gain(g) / discount(i))
        .sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryScore {
    pub query_id: String,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Mean NDCG@10 over judged queries; 0 when none are judged.
    pub mean_ndcg: f64,
    pub per_query: Vec<QueryScore>,
    pub runs: Vec<RankedList>,
    /// Queries skipped for lack of judgments.
    pub skipped: usize,
}

impl EvalReport {
    pub fn evaluated(&self) -> usize {
        self.per_query.len()
    }

    pub fn per_query_csv(&self) -> String {
        let mut s = String::from("query_id,ndcg_at_10\n");
        for q in &self.per_query {
            s.push_str(&format!("{},{:.9}\n", q.query_id, q.ndcg));
        }
        s
    }

    pub fn run_tsv(&self) -> String {
        run_tsv(&self.runs)
    }
}

/// Searches every query with positive judgments and scores it. Queries
/// without judgments are skipped with a warning.
pub fn evaluate_run(queries: &VectorStore, store: &VectorStore, qrels: &Qrels, k: usize) -> Result<EvalReport> {
    if !queries.is_empty() && !store.is_empty() && queries.dim != store.dim {
        return Err(Error::Data(format!(
            "query vectors have dimension {}, store has {}",
            queries.dim, store.dim
        )));
    }
    let judged: Vec<usize> = (0..queries.len())
        .filter(|&i| {
            qrels
                .get(&queries.ids[i])
                .is_some_and(|j| j.values().any(|&g| g > 0))
        })
        .collect();
    let skipped = queries.len() - judged.len();
    if skipped > 0 {
        log::warn!("{skipped} queries have no relevance judgments and were excluded");
    }
    let results: Vec<(RankedList, f64)> = judged
        .par_iter()
        .map(|&i| {
            let id = &queries.ids[i];
            let q: Vec<f64> = queries.row(i).iter().map(|&x| x as f64).collect();
            let ranked = top_k(id, &q, store, k)?;
            let ndcg = ndcg_at_10(&ranked, qrels.get(id));
            Ok((ranked, ndcg))
        })
        .collect::<Result<_>>()?;
    let per_query: Vec<QueryScore> = results
        .iter()
        .map(|(r, n)| QueryScore {
            query_id: r.query_id.clone(),
            ndcg: *n,
        })
        .collect();
    let mean_ndcg = if per_query.is_empty() {
        0.0
    } else {
        per_query.iter().map(|q| q.ndcg).sum::<f64>() / per_query.len() as f64
    };
    Ok(EvalReport {
        mean_ndcg,
        per_query,
        runs: results.into_iter().map(|(r, _)| r).collect(),
        skipped,
    })
}

/// `query_id \t rank \t passage_id \t score` lines, ranks from 1.
pub fn run_tsv(runs: &[RankedList]) -> String {
    let mut s = String::new();
    for r in runs {
        for (rank, (pid, score)) in r.hits.iter().enumerate() {
            s.push_str(&format!("{}\t{}\t{}\t{:.9}\n", r.query_id, rank + 1, pid, score));
        }
    }
    s
}

pub const VECTOR_MAGIC: &[u8; 4] = b"VEC1";

/// `"VEC1" | d u32 | count u64 | (id_len u16 | id)* | f32 rows`
pub fn encode_vectors(ids: &[String], dim: usize, data: &[f32]) -> Result<Vec<u8>> {
    if data.len() != ids.len() * dim {
        return Err(Error::Data(format!(
            "{} values for {} vectors of dimension {dim}",
            data.len(),
            ids.len()
        )));
    }
    let mut out = Vec::with_capacity(16 + data.len() * 4);
    out.extend_from_slice(VECTOR_MAGIC);
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(ids.len() as u64).to_le_bytes());
    for id in ids {
        let len = u16::try_from(id.len()).map_err(|_| Error::Data(format!("id too long: {id:?}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id.as_bytes());
    }
    for x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

/// Decoded vector file: ids, dimension and row-major values.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorFile {
    pub dim: usize,
    pub ids: Vec<String>,
    pub data: Vec<f32>,
}

impl VectorFile {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn into_store(self, similarity: Similarity) -> Result<VectorStore> {
        let dim = self.dim;
        let rows: Vec<(String, &[f32])> = self
            .ids
            .iter()
            .cloned()
            .zip(self.data.chunks(dim.max(1)))
            .collect();
        let mut store = VectorStore::build(rows, similarity)?;
        if store.is_empty() {
            store.dim = dim;
        }
        Ok(store)
    }
}

pub fn decode_vectors(bytes: &[u8]) -> Result<VectorFile> {
    if bytes.len() < 4 || &bytes[..4] != VECTOR_MAGIC {
        return Err(Error::Format("not a VEC1 vector file".into()));
    }
    let mut r = ByteReader::new(&bytes[4..], "vector file");
    let dim = r.u32()? as usize;
    let count = r.u64()? as usize;
    let mut ids = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let len = r.u16()? as usize;
        ids.push(r.string(len)?);
    }
    let data = r.f32_vec(count * dim)?;
    if !r.is_done() {
        return Err(Error::Format("trailing bytes after vector file".into()));
    }
    Ok(VectorFile { dim, ids, data })
}

pub fn write_vectors(path: impl AsRef<Path>, ids: &[String], dim: usize, data: &[f32]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_vectors(ids, dim, data)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_vectors(path: impl AsRef<Path>) -> Result<VectorFile> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_vectors(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn ranked(ids: &[&str]) -> RankedList {
        RankedList {
            query_id: "q".into(),
            hits: ids
                .iter()
                .enumerate()
                .map(|(i, id)| (id.to_string(), -(i as f64)))
                .collect(),
        }
    }

    fn grades(pairs: &[(&str, u32)]) -> BTreeMap<String, u32> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn build_store_cases() {
        let s = VectorStore::build(
            [("a", vec![1.0f32, 0.0, 0.0, 0.0]), ("b", vec![0.0; 4]), ("c", vec![0.5; 4])],
            Similarity::Cosine,
        )
        .unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.dim(), 4);
        let err = VectorStore::build([("a", vec![1.0f32]), ("a", vec![2.0])], Similarity::Dot).unwrap_err();
        assert!(err.to_string().contains("\"a\""));
        assert!(VectorStore::build([("a", vec![1.0f32]), ("b", vec![2.0, 1.0])], Similarity::Dot).is_err());
        let empty = VectorStore::build(Vec::<(String, Vec<f32>)>::new(), Similarity::Dot).unwrap();
        assert!(empty.is_empty());
        assert!(top_k("q", &[1.0, 2.0], &empty, 5).unwrap().hits.is_empty());
    }

    #[test]
    fn top_k_basic() {
        let s = VectorStore::build(
            [("a", vec![1.0f32, 0.0]), ("b", vec![0.0, 1.0]), ("c", vec![0.6, 0.8])],
            Similarity::Cosine,
        )
        .unwrap();
        let r = top_k("q", &[0.0, 1.0], &s, 1).unwrap();
        assert_eq!(r.hits[0].0, "b");
        assert_eq!(r.hits[0].1, 1.0);
        let all = top_k("q", &[0.0, 1.0], &s, 10).unwrap();
        let ids: Vec<_> = all.hits.iter().map(|h| h.0.as_str()).collect();
        assert_eq!(ids, ["b", "c", "a"]);
        assert!(top_k("q", &[1.0], &s, 1).is_err());
        assert!(top_k("q", &[1.0, 0.0], &s, 0).is_err());
    }

    #[test]
    fn ties_break_by_id() {
        let s = VectorStore::build(
            [("z", vec![1.0f32]), ("m", vec![1.0]), ("a", vec![1.0]), ("b", vec![0.5])],
            Similarity::Dot,
        )
        .unwrap();
        let r = top_k("q", &[1.0], &s, 2).unwrap();
        let ids: Vec<_> = r.hits.iter().map(|h| h.0.as_str()).collect();
        assert_eq!(ids, ["a", "m"]);
    }

    #[test]
    fn ndcg_cases() {
        let g = grades(&[("p", 1)]);
        assert_eq!(ndcg_at_10(&ranked(&["p", "x"]), Some(&g)), 1.0);
        assert!((ndcg_at_10(&ranked(&["x", "y", "p"]), Some(&g)) - 0.5).abs() < 1e-15);
        assert_eq!(ndcg_at_10(&ranked(&["x", "y"]), Some(&g)), 0.0);
        assert_eq!(ndcg_at_10(&ranked(&["x"]), None), 0.0);
        assert_eq!(ndcg_at_10(&ranked(&["x"]), Some(&grades(&[("x", 0)]))), 0.0);
        let far: Vec<String> = (0..10).map(|i| format!("x{i}")).chain(["p".to_string()]).collect();
        let far: Vec<&str> = far.iter().map(String::as_str).collect();
        assert_eq!(ndcg_at_10(&ranked(&far), Some(&g)), 0.0);
    }

    #[test]
    fn evaluate_perfect_and_skipped() {
        let passages = VectorStore::build(
            [("p0", vec![1.0f32, 0.0]), ("p1", vec![0.0, 1.0])],
            Similarity::Cosine,
        )
        .unwrap();
        let queries = VectorStore::build(
            [("q0", vec![2.0f32, 0.1]), ("q1", vec![0.1, 3.0]), ("q2", vec![1.0, 1.0])],
            Similarity::Cosine,
        )
        .unwrap();
        let mut qrels = Qrels::new();
        qrels.insert("q0", "p0", 1);
        qrels.insert("q1", "p1", 1);
        let rep = evaluate_run(&queries, &passages, &qrels, 10).unwrap();
        assert_eq!(rep.mean_ndcg, 1.0);
        assert_eq!(rep.skipped, 1);
        assert_eq!(rep.evaluated(), 2);
        assert!(rep.per_query_csv().starts_with("query_id,ndcg_at_10\nq0,1.0"));
        assert!(rep.run_tsv().starts_with("q0\t1\tp0\t"));
        let none = evaluate_run(&queries, &passages, &Qrels::new(), 10).unwrap();
        assert_eq!(none.evaluated(), 0);
        assert_eq!(none.mean_ndcg, 0.0);
    }

    #[test]
    fn vec1_round_trip_and_errors() {
        let ids = vec!["a".to_string(), "bb".to_string()];
        let data = vec![1.0f32, -2.5, 3.25, f32::MIN_POSITIVE];
        let bytes = encode_vectors(&ids, 2, &data).unwrap();
        let back = decode_vectors(&bytes).unwrap();
        assert_eq!(back, VectorFile { dim: 2, ids, data });
        assert!(decode_vectors(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_vectors(b"VEC2").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_vectors(&extra).is_err());
        assert!(encode_vectors(&["a".into()], 3, &[1.0]).is_err());
    }
}
