//! Subject graphs: cosine similarity between region embeddings and top-K
//! neighbor selection, merged into an undirected edge set.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::io::{f32_to_bytes, read_f32_payload, read_json, write_bytes, write_json};
use crate::volume::payload_path;

pub const DEFAULT_K: usize = 10;

/// Dense symmetric `n×n` similarity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub n: usize,
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }
}

/// Pairwise cosine similarity of the rows of `z` (`n×d`). Rows with zero
/// norm are 0 against everything, themselves included.
pub fn cosine_similarity_matrix(z: &[f32], n: usize, d: usize) -> Result<SimilarityMatrix> {
    if n < 2 || d == 0 || z.len() != n * d {
        return Err(Error::Input(format!(
            "need at least 2 rows of width d > 0, got {} values for n={n}, d={d}",
            z.len()
        )));
    }
    let rows: Vec<&[f32]> = z.chunks(d).collect();
    let norms: Vec<f64> = rows
        .iter()
        .map(|r| r.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt())
        .collect();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        if norms[i] == 0.0 {
            continue;
        }
        values[i * n + i] = 1.0;
        for j in i + 1..n {
            if norms[j] == 0.0 {
                continue;
            }
            let dot: f64 = rows[i]
                .iter()
                .zip(rows[j])
                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                .sum();
            let s = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            values[i * n + j] = s;
            values[j * n + i] = s;
        }
    }
    Ok(SimilarityMatrix { n, values })
}

/// Candidate ordered so that the heap's maximum is the worst kept neighbor:
/// lower similarity, then higher index.
#[derive(PartialEq)]
struct Candidate {
    s: f64,
    j: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .s
            .total_cmp(&self.s)
            .then_with(|| self.j.cmp(&other.j))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// The `k` most similar peers of node `i`, ties to the lower index.
pub fn top_k_neighbors(s: &SimilarityMatrix, i: usize, k: usize) -> Vec<usize> {
    let mut heap = BinaryHeap::with_capacity(k + 1);
    for j in (0..s.n).filter(|&j| j != i) {
        heap.push(Candidate { s: s.get(i, j), j });
        if heap.len() > k {
            heap.pop();
        }
    }
    let mut kept: Vec<usize> = heap.into_iter().map(|c| c.j).collect();
    kept.sort_unstable();
    kept
}

/// Weighted undirected graph over one subject's regions.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectGraph {
    pub subject_id: String,
    pub label: u8,
    pub region_ids: Vec<u32>,
    /// Embedding width.
    pub d: usize,
    /// `n×d`, row-major.
    pub node_features: Vec<f32>,
    /// `(i, j, S_ij)` with `i < j`, sorted.
    pub edges: Vec<(usize, usize, f32)>,
}

impl SubjectGraph {
    pub fn n(&self) -> usize {
        self.region_ids.len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n()];
        for &(i, j, _) in &self.edges {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }

    /// `n×n` neighborhood mask including self-loops.
    pub fn neighborhood_mask(&self) -> Vec<bool> {
        let n = self.n();
        let mut mask = vec![false; n * n];
        for i in 0..n {
            mask[i * n + i] = true;
        }
        for &(i, j, _) in &self.edges {
            mask[i * n + j] = true;
            mask[j * n + i] = true;
        }
        mask
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(
            path,
            &GraphHeader {
                subject_id: self.subject_id.clone(),
                label: self.label,
                n: self.n(),
                region_ids: self.region_ids.clone(),
                edges: self.edges.clone(),
            },
        )?;
        write_bytes(&payload_path(path), &f32_to_bytes(&self.node_features))
    }

    /// Loads a graph file; the feature width comes from the payload size.
    pub fn load(path: &Path) -> Result<Self> {
        let h: GraphHeader = read_json(path)?;
        if h.n == 0 || h.n != h.region_ids.len() {
            return Err(Error::format(path, 0, "n does not match region_ids"));
        }
        if let Some(e) = h.edges.iter().find(|e| e.0 >= e.1 || e.1 >= h.n) {
            return Err(Error::format(path, 0, format!("invalid edge {e:?}")));
        }
        let payload = payload_path(path);
        let bytes = std::fs::metadata(&payload)
            .map_err(|e| Error::io(&payload, e))?
            .len() as usize;
        if bytes == 0 || !bytes.is_multiple_of(4 * h.n) {
            return Err(Error::format(
                &payload,
                bytes as u64,
                format!("payload of {bytes} bytes is not {} feature rows", h.n),
            ));
        }
        let d = bytes / 4 / h.n;
        let node_features = read_f32_payload(&payload, h.n * d)?;
        Ok(SubjectGraph {
            subject_id: h.subject_id,
            label: h.label,
            region_ids: h.region_ids,
            d,
            node_features,
            edges: h.edges,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphHeader {
    subject_id: String,
    label: u8,
    n: usize,
    region_ids: Vec<u32>,
    edges: Vec<(usize, usize, f32)>,
}

/// Union over nodes of each node's top-`k` neighbors, weighted by `S`.
pub fn knn_graph(
    s: &SimilarityMatrix,
    z: &[f32],
    d: usize,
    k: usize,
    subject_id: &str,
    label: u8,
    region_ids: &[u32],
) -> Result<SubjectGraph> {
    let n = s.n;
    if n <= k || k == 0 {
        return Err(Error::Input(format!(
            "knn graph needs 0 < K < N, got K={k}, N={n}"
        )));
    }
    if region_ids.len() != n || z.len() != n * d {
        return Err(Error::Input(format!(
            "{} region ids and {} feature values for {n} nodes of width {d}",
            region_ids.len(),
            z.len()
        )));
    }
    let mut pairs = BTreeSet::new();
    for i in 0..n {
        for j in top_k_neighbors(s, i, k) {
            pairs.insert((i.min(j), i.max(j)));
        }
    }
    Ok(SubjectGraph {
        subject_id: subject_id.to_string(),
        label,
        region_ids: region_ids.to_vec(),
        d,
        node_features: z.to_vec(),
        edges: pairs
            .into_iter()
            .map(|(i, j)| (i, j, s.get(i, j) as f32))
            .collect(),
    })
}

/// Similarity then top-`k` selection in one call.
pub fn build_graph(
    z: &[f32],
    d: usize,
    k: usize,
    subject_id: &str,
    label: u8,
    region_ids: &[u32],
) -> Result<SubjectGraph> {
    let s = cosine_similarity_matrix(z, region_ids.len(), d)?;
    knn_graph(&s, z, d, k, subject_id, label, region_ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gaussian;
    use crate::rng::stream;

    fn ids(n: usize) -> Vec<u32> {
        (1..=n as u32).collect()
    }

    /// Sort every candidate list in full and keep the first k.
    fn oracle_edges(s: &SimilarityMatrix, k: usize) -> Vec<(usize, usize, f32)> {
        let mut set = BTreeSet::new();
        for i in 0..s.n {
            let mut c: Vec<usize> = (0..s.n).filter(|&j| j != i).collect();
            c.sort_by(|&a, &b| s.get(i, b).partial_cmp(&s.get(i, a)).unwrap().then(a.cmp(&b)));
            for &j in &c[..k] {
                set.insert((i.min(j), i.max(j)));
            }
        }
        set.into_iter().map(|(i, j)| (i, j, s.get(i, j) as f32)).collect()
    }

    #[test]
    fn cosine_closed_forms() {
        let s = cosine_similarity_matrix(&[1.0, 0.0, 1.0, 1.0, 0.0, 3.0, 2.0, 0.0], 4, 2).unwrap();
        assert!((s.get(0, 1) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(s.get(0, 2), 0.0);
        assert!((s.get(0, 3) - 1.0).abs() < 1e-12);
        assert_eq!(s.get(2, 2), 1.0);
    }

    #[test]
    fn zero_rows_have_zero_similarity() {
        let s = cosine_similarity_matrix(&[0.0, 0.0, 1.0, 2.0, 3.0, 1.0], 3, 2).unwrap();
        assert_eq!(s.get(0, 0), 0.0);
        assert_eq!(s.get(0, 1), 0.0);
        assert_eq!(s.get(2, 0), 0.0);
    }

    #[test]
    fn matrix_is_symmetric_and_bounded() {
        let z = gaussian(&mut stream(1, "z", 0), 50 * 7, 1.0);
        let s = cosine_similarity_matrix(&z, 50, 7).unwrap();
        for i in 0..50 {
            assert!((s.get(i, i) - 1.0).abs() < 1e-6);
            for j in 0..50 {
                assert_eq!(s.get(i, j), s.get(j, i));
                assert!(s.get(i, j).abs() <= 1.0 + 1e-6);
            }
        }
    }

    #[test]
    fn matches_full_sort_oracle() {
        let z = gaussian(&mut stream(2, "z", 0), 200 * 16, 1.0);
        let s = cosine_similarity_matrix(&z, 200, 16).unwrap();
        let g = knn_graph(&s, &z, 16, 10, "s", 1, &ids(200)).unwrap();
        assert_eq!(g.edges, oracle_edges(&s, 10));
        assert!(g.degrees().iter().all(|&d| d >= 10));
        assert!(g.edges.len() >= 1000 && g.edges.len() <= 2000);
    }

    #[test]
    fn ties_prefer_lower_index() {
        // Every peer is equally similar, so node i keeps the K lowest indices.
        let z = vec![1.0f32; 12 * 3];
        let s = cosine_similarity_matrix(&z, 12, 3).unwrap();
        assert_eq!(top_k_neighbors(&s, 0, 10), (1..=10).collect::<Vec<_>>());
        assert_eq!(top_k_neighbors(&s, 5, 10), vec![0, 1, 2, 3, 4, 6, 7, 8, 9, 10]);
        let g = knn_graph(&s, &z, 3, 10, "s", 0, &ids(12)).unwrap();
        assert!(g.degrees().iter().all(|&d| d >= 10));
    }

    #[test]
    fn duplicates_link_with_unit_weight() {
        let mut z = gaussian(&mut stream(3, "z", 0), 20 * 4, 1.0);
        let row: Vec<f32> = z[..4].to_vec();
        z[7 * 4..8 * 4].copy_from_slice(&row);
        let g = build_graph(&z, 4, 10, "s", 0, &ids(20)).unwrap();
        let e = g.edges.iter().find(|e| e.0 == 0 && e.1 == 7).unwrap();
        assert!((e.2 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn scaling_one_embedding_changes_nothing() {
        let mut z = gaussian(&mut stream(4, "z", 0), 30 * 5, 1.0);
        let a = build_graph(&z, 5, 10, "s", 0, &ids(30)).unwrap();
        for v in &mut z[10..15] {
            *v *= 4.0;
        }
        let b = build_graph(&z, 5, 10, "s", 0, &ids(30)).unwrap();
        let strip = |g: &SubjectGraph| g.edges.iter().map(|e| (e.0, e.1)).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
        for (x, y) in a.edges.iter().zip(&b.edges) {
            assert!((x.2 - y.2).abs() < 1e-6);
        }
    }

    #[test]
    fn reversing_nodes_relabels_the_graph() {
        let n = 25;
        let z = gaussian(&mut stream(5, "z", 0), n * 6, 1.0);
        let rev: Vec<f32> = z.chunks(6).rev().flatten().copied().collect();
        let a = build_graph(&z, 6, 10, "s", 0, &ids(n)).unwrap();
        let b = build_graph(&rev, 6, 10, "s", 0, &ids(n)).unwrap();
        let mut mapped: Vec<(usize, usize)> = b
            .edges
            .iter()
            .map(|e| {
                let (i, j) = (n - 1 - e.0, n - 1 - e.1);
                (i.min(j), i.max(j))
            })
            .collect();
        mapped.sort_unstable();
        assert_eq!(mapped, a.edges.iter().map(|e| (e.0, e.1)).collect::<Vec<_>>());
    }

    #[test]
    fn k_must_be_below_n() {
        let z = vec![1.0f32; 10 * 2];
        assert!(matches!(build_graph(&z, 2, 10, "s", 0, &ids(10)), Err(Error::Input(_))));
    }

    #[test]
    fn graph_file_round_trip() {
        let z = gaussian(&mut stream(6, "z", 0), 15 * 3, 1.0);
        let g = build_graph(&z, 3, 10, "sub-0003", 1, &ids(15)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.json");
        g.save(&path).unwrap();
        assert_eq!(SubjectGraph::load(&path).unwrap(), g);
        let header: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(header["n"], 15);
        assert!(header["edges"][0].as_array().unwrap().len() == 3);
    }
}
