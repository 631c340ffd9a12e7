//! Exhaustive 1:N search over a packed gallery of unit templates.
//!
//! Scores are exact cosine similarities computed with
//! [`dot_f64`](crate::template::dot_f64); ranking is by descending score with
//! ties broken by lower gallery index, so results never depend on how rows
//! are sharded across workers.
//!
//! `.fpg` layout (little-endian): magic `FPGL`, version `u8`, dim `u16`,
//! count `u64`, then `count` ids as `u16` byte length + UTF-8, then the
//! `count × dim` `f32` block.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::io::Read;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{format_err, validation, Result};
use crate::template::{dot_f64, FixedTemplate, NORM_TOLERANCE};

pub const GALLERY_MAGIC: &[u8; 4] = b"FPGL";
pub const GALLERY_VERSION: u8 = 1;

/// Rows scored per parallel task.
const SHARD_ROWS: usize = 1024;

#[derive(Debug, Clone)]
pub struct Gallery {
    ids: Vec<String>,
    matrix: Vec<f32>,
    dim: usize,
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Candidate {
    pub id: String,
    pub index: usize,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SearchResult {
    pub candidates: Vec<Candidate>,
}

impl SearchResult {
    pub fn top(&self) -> Option<&Candidate> {
        self.candidates.first()
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Ranking order: higher score first, then lower index.
#[inline]
pub fn rank_order(a: (f32, usize), b: (f32, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Heap entry whose maximum is the *worst* retained candidate.
#[derive(PartialEq)]
struct Worst(f32, usize);

impl Eq for Worst {}

impl PartialOrd for Worst {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Worst {
    fn cmp(&self, other: &Self) -> Ordering {
        rank_order((self.0, self.1), (other.0, other.1))
    }
}

pub fn build_gallery(templates: Vec<(String, FixedTemplate)>) -> Result<Gallery> {
    let dim = match templates.first() {
        Some((_, t)) => t.dim(),
        None => return Err(validation("gallery needs at least one template")),
    };
    let mut ids = Vec::with_capacity(templates.len());
    let mut matrix = Vec::with_capacity(templates.len() * dim);
    let mut index = HashMap::with_capacity(templates.len());
    for (id, t) in templates {
        if t.dim() != dim {
            return Err(validation(format!(
                "template {id:?} has dim {}, gallery dim is {dim}",
                t.dim()
            )));
        }
        if id.len() > u16::MAX as usize {
            return Err(validation("gallery id longer than 65535 bytes"));
        }
        if index.insert(id.clone(), ids.len()).is_some() {
            return Err(validation(format!("duplicate gallery id {id:?}")));
        }
        matrix.extend_from_slice(t.values());
        ids.push(id);
    }
    Ok(Gallery { ids, matrix, dim, index })
}

impl Gallery {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.matrix[r * self.dim..(r + 1) * self.dim]
    }

    pub fn template(&self, r: usize) -> FixedTemplate {
        FixedTemplate::from_unit_values(self.row(r).to_vec()).expect("gallery rows are unit templates")
    }

    fn check_query(&self, query: &FixedTemplate) -> Result<()> {
        if query.dim() != self.dim {
            return Err(validation(format!(
                "query dim {} does not match gallery dim {}",
                query.dim(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Scores every row against `query` into `out`.
    pub fn score_all_into(&self, query: &FixedTemplate, out: &mut Vec<f32>) -> Result<()> {
        self.check_query(query)?;
        out.clear();
        out.extend(self.matrix.chunks_exact(self.dim).map(|row| dot_f64(row, query.values()) as f32));
        Ok(())
    }

    /// Same as [`score_all_into`](Self::score_all_into), sharded over the
    /// current rayon pool.
    pub fn score_all_par(&self, query: &FixedTemplate) -> Result<Vec<f32>> {
        self.check_query(query)?;
        let mut out = vec![0.0f32; self.len()];
        out.par_chunks_mut(SHARD_ROWS)
            .zip(self.matrix.par_chunks(SHARD_ROWS * self.dim))
            .for_each(|(scores, rows)| {
                for (s, row) in scores.iter_mut().zip(rows.chunks_exact(self.dim)) {
                    *s = dot_f64(row, query.values()) as f32;
                }
            });
        Ok(out)
    }

    /// Exact top-`k` by cosine score on the calling thread.
    pub fn search(&self, query: &FixedTemplate, k: usize) -> Result<SearchResult> {
        if k == 0 {
            return Err(validation("k must be at least 1"));
        }
        self.check_query(query)?;
        let mut heap = BinaryHeap::with_capacity(k + 1);
        for (r, row) in self.matrix.chunks_exact(self.dim).enumerate() {
            let s = dot_f64(row, query.values()) as f32;
            push_bounded(&mut heap, Worst(s, r), k);
        }
        Ok(self.finish(heap))
    }

    /// Exact top-`k` with rows sharded across the current rayon pool; each
    /// shard keeps its own top-`k` and the merge reapplies the ranking order.
    pub fn search_par(&self, query: &FixedTemplate, k: usize) -> Result<SearchResult> {
        if k == 0 {
            return Err(validation("k must be at least 1"));
        }
        self.check_query(query)?;
        let heap = self
            .matrix
            .par_chunks(SHARD_ROWS * self.dim)
            .enumerate()
            .map(|(shard, rows)| {
                let mut heap = BinaryHeap::with_capacity(k + 1);
                for (off, row) in rows.chunks_exact(self.dim).enumerate() {
                    let s = dot_f64(row, query.values()) as f32;
                    push_bounded(&mut heap, Worst(s, shard * SHARD_ROWS + off), k);
                }
                heap
            })
            .reduce(BinaryHeap::new, |mut a, b| {
                for c in b {
                    push_bounded(&mut a, c, k);
                }
                a
            });
        Ok(self.finish(heap))
    }

    fn finish(&self, heap: BinaryHeap<Worst>) -> SearchResult {
        // into_sorted_vec is ascending in Worst order, i.e. best first.
        let candidates = heap
            .into_sorted_vec()
            .into_iter()
            .map(|Worst(score, index)| Candidate {
                id: self.ids[index].clone(),
                index,
                score,
            })
            .collect();
        SearchResult { candidates }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(15 + self.matrix.len() * 4 + self.ids.len() * 16);
        out.extend_from_slice(GALLERY_MAGIC);
        out.push(GALLERY_VERSION);
        out.extend_from_slice(&(self.dim as u16).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        for v in &self.matrix {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4)? != GALLERY_MAGIC {
            return Err(format_err("bad gallery magic"));
        }
        let version = r.take(1)?[0];
        if version != GALLERY_VERSION {
            return Err(format_err(format!("unsupported gallery version {version}")));
        }
        let dim = u16::from_le_bytes(r.array()?) as usize;
        let count = u64::from_le_bytes(r.array()?);
        if dim == 0 || count == 0 {
            return Err(format_err("gallery dim and count must be positive"));
        }
        // Each entry needs at least a length prefix and its row.
        let min_entry = 2 + 4 * dim as u64;
        if count.saturating_mul(min_entry) > bytes.len() as u64 {
            return Err(format_err("gallery count exceeds file size"));
        }
        let count = count as usize;
        let mut ids = Vec::with_capacity(count);
        for _ in 0..count {
            let len = u16::from_le_bytes(r.array()?) as usize;
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|_| format_err("gallery id is not UTF-8"))?;
            ids.push(id.to_string());
        }
        let block = r.take(count * dim * 4)?;
        if r.pos != bytes.len() {
            return Err(format_err("trailing bytes after gallery block"));
        }
        let values: Vec<f32> = block
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let mut templates = Vec::with_capacity(count);
        for (id, row) in ids.into_iter().zip(values.chunks_exact(dim)) {
            let norm: f64 = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(format_err(format!("gallery row {id:?} is not unit norm ({norm})")));
            }
            let t = FixedTemplate::from_unit_values(row.to_vec()).map_err(|e| format_err(e.to_string()))?;
            templates.push((id, t));
        }
        build_gallery(templates).map_err(|e| format_err(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }
}

fn push_bounded(heap: &mut BinaryHeap<Worst>, c: Worst, k: usize) {
    if heap.len() < k {
        heap.push(c);
    } else if let Some(worst) = heap.peek() {
        if c < *worst {
            heap.pop();
            heap.push(c);
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format_err("gallery file truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

/// Free-function form of [`Gallery::search`].
pub fn search(gallery: &Gallery, query: &FixedTemplate, k: usize) -> Result<SearchResult> {
    gallery.search(query, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f32]) -> FixedTemplate {
        FixedTemplate::normalized(v).unwrap()
    }

    #[test]
    fn build_errors() {
        assert!(build_gallery(vec![]).is_err());
        let g = build_gallery(vec![("a".into(), t(&[1.0, 0.0]))]).unwrap();
        assert_eq!(g.len(), 1);
        assert!(build_gallery(vec![("a".into(), t(&[1.0, 0.0])), ("a".into(), t(&[0.0, 1.0]))]).is_err());
        assert!(build_gallery(vec![("a".into(), t(&[1.0, 0.0])), ("b".into(), t(&[0.0, 1.0, 0.0]))]).is_err());
    }

    #[test]
    fn search_basics() {
        let g = build_gallery(vec![
            ("a".into(), t(&[1.0, 0.0])),
            ("b".into(), t(&[0.0, 1.0])),
            ("c".into(), t(&[1.0, 1.0])),
        ])
        .unwrap();
        let r = g.search(&t(&[0.0, 1.0]), 1).unwrap();
        assert_eq!(r.top().unwrap().id, "b");
        assert!((r.top().unwrap().score - 1.0).abs() < 1e-6);
        let r = g.search(&t(&[0.0, 1.0]), 10).unwrap();
        assert_eq!(r.len(), 3);
        assert_eq!(r.candidates[1].id, "c");
        assert!(g.search(&t(&[1.0, 0.0, 0.0]), 1).is_err());
        assert!(g.search(&t(&[1.0, 0.0]), 0).is_err());
    }

    #[test]
    fn ties_prefer_lower_index() {
        let g = build_gallery(vec![
            ("x".into(), t(&[0.0, 1.0])),
            ("y".into(), t(&[1.0, 0.0])),
            ("z".into(), t(&[1.0, 0.0])),
        ])
        .unwrap();
        let r = g.search(&t(&[1.0, 0.0]), 2).unwrap();
        let ids: Vec<_> = r.candidates.iter().map(|c| c.id.as_str()).collect();
        assert_eq!(ids, ["y", "z"]);
        assert_eq!(g.search_par(&t(&[1.0, 0.0]), 2).unwrap(), r);
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let g = build_gallery(vec![("alpha".into(), t(&[1.0, 2.0, 3.0])), ("β".into(), t(&[0.0, 1.0, 0.0]))]).unwrap();
        let bytes = g.to_bytes();
        let back = Gallery::from_bytes(&bytes).unwrap();
        assert_eq!(back.ids(), g.ids());
        assert_eq!(back.matrix, g.matrix);
        assert!(Gallery::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'Q';
        assert!(Gallery::from_bytes(&bad).is_err());
        let mut bad = bytes;
        bad.push(0);
        assert!(Gallery::from_bytes(&bad).is_err());
    }
}
