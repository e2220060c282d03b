//! Node-importance explanations for a trained GAT.
//!
//! Each node gets a sigmoid-parameterized mask that scales its features. The
//! mask is fitted to keep the model's own prediction while staying sparse,
//! and the normalized final mask is the node's importance.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gat::{features, gat_forward, GAT};
use crate::graph::SubjectGraph;
use crate::rng::stream;
use crate::tensor::{AdamConfig, AdamState, ParamStore, Tape};
use crate::volume::io::write_json;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainConfig {
    pub steps: usize,
    pub sparsity_weight: f64,
    pub learning_rate: f64,
    /// Starting mask value, in (0, 1).
    pub mask_init: f64,
    /// Std of seeded Gaussian noise added to the initial mask logits.
    pub init_jitter: f64,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            steps: 200,
            sparsity_weight: 0.05,
            learning_rate: 0.01,
            mask_init: 0.9,
            init_jitter: 0.0,
            top_k: 10,
            seed: 0,
        }
    }
}

impl ExplainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_init > 0.0 && self.mask_init < 1.0) {
            return Err(Error::Config(format!(
                "explain.mask_init {} not in (0, 1)",
                self.mask_init
            )));
        }
        if !(self.sparsity_weight >= 0.0 && self.init_jitter >= 0.0) {
            return Err(Error::Config(
                "explain.sparsity_weight and explain.init_jitter must be non-negative".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || self.top_k == 0 {
            return Err(Error::Config(
                "explain.learning_rate and explain.top_k must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ClassContext {
    #[serde(rename = "MDD")]
    Mdd,
    #[serde(rename = "HC")]
    Hc,
    #[serde(rename = "both")]
    Both,
}

impl ClassContext {
    pub const ALL: [ClassContext; 3] = [ClassContext::Mdd, ClassContext::Hc, ClassContext::Both];

    pub fn admits(self, label: u8) -> bool {
        match self {
            ClassContext::Mdd => label == 1,
            ClassContext::Hc => label == 0,
            ClassContext::Both => true,
        }
    }
}

impl fmt::Display for ClassContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassContext::Mdd => "MDD",
            ClassContext::Hc => "HC",
            ClassContext::Both => "both",
        })
    }
}

/// Per-subject importance, summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeImportanceMap {
    pub subject_id: String,
    pub label: u8,
    pub region_ids: Vec<u32>,
    pub scores: Vec<f64>,
}

/// Logits of the frozen model with node features scaled by `mask`.
pub fn masked_logits(gat: &GAT, graph: &SubjectGraph, mask: &[f32]) -> Result<Vec<f32>> {
    if mask.len() != graph.n() {
        return Err(Error::Input(format!(
            "mask of {} values for {} nodes",
            mask.len(),
            graph.n()
        )));
    }
    let mut tape = Tape::new();
    let params = frozen(&mut tape, gat.params())?;
    let x = features(&mut tape, graph)?;
    let m = tape.constant(&[graph.n()], mask.to_vec())?;
    let x = tape.scale_rows(x, m)?;
    let t = gat_forward(&mut tape, gat.config(), &params, x, &graph.neighborhood_mask(), None)?;
    Ok(tape.value(t.logits).to_vec())
}

fn frozen(tape: &mut Tape<f32>, params: &ParamStore<f32>) -> Result<Vec<crate::tensor::Var>> {
    params
        .iter()
        .map(|p| tape.constant(&p.shape, p.value.clone()))
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Fits a node mask for one subject. `index` selects the subject's jitter
/// stream.
pub fn explain_subject(
    graph: &SubjectGraph,
    gat: &GAT,
    cfg: &ExplainConfig,
    index: u64,
) -> Result<NodeImportanceMap> {
    cfg.validate()?;
    if graph.d != gat.config().input_dim {
        return Err(Error::Config(format!(
            "graph features of width {} for a model expecting {}",
            graph.d,
            gat.config().input_dim
        )));
    }
    let n = graph.n();
    let full = gat.forward(graph)?.logits;
    let target = full
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > full[best] { i } else { best });

    let logit0 = (cfg.mask_init / (1.0 - cfg.mask_init)).ln();
    let mut theta = vec![logit0 as f32; n];
    if cfg.init_jitter > 0.0 {
        let normal = Normal::new(0.0, cfg.init_jitter).expect("finite jitter");
        let mut rng = stream(cfg.seed, "explain", index);
        for t in &mut theta {
            *t += normal.sample(&mut rng) as f32;
        }
    }
    let mut store = ParamStore::new();
    store.push("mask_logits", &[n], theta);
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.learning_rate, 0.0), &store);
    let mask_adj = graph.neighborhood_mask();

    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let params = frozen(&mut tape, gat.params())?;
        let theta = store.bind(&mut tape);
        let m = tape.sigmoid(theta[0]);
        let x = features(&mut tape, graph)?;
        let x = tape.scale_rows(x, m)?;
        let t = gat_forward(&mut tape, gat.config(), &params, x, &mask_adj, None)?;
        let ce = tape.cross_entropy(t.logits, &[target])?;
        let l1 = tape.sum(m);
        let l1 = tape.scale(l1, cfg.sparsity_weight as f32);
        let loss = tape.add(ce, l1)?;
        tape.backward(loss)?;
        let grads = store.grads(&tape, &theta);
        adam.step(&mut store, &grads)?;
    }

    let mask: Vec<f64> = store.get(0).value.iter().map(|&t| sigmoid(f64::from(t))).collect();
    let total: f64 = mask.iter().sum();
    Ok(NodeImportanceMap {
        subject_id: graph.subject_id.clone(),
        label: graph.label,
        region_ids: graph.region_ids.clone(),
        scores: mask.iter().map(|m| m / total).collect(),
    })
}

/// Element-wise mean of the maps admitted by `context`.
pub fn aggregate_importance(maps: &[NodeImportanceMap], context: ClassContext) -> Result<Vec<f64>> {
    let chosen: Vec<&NodeImportanceMap> = maps.iter().filter(|m| context.admits(m.label)).collect();
    let first = chosen
        .first()
        .ok_or_else(|| Error::Input(format!("no subjects in context {context}")))?;
    let n = first.scores.len();
    let mut mean = vec![0.0; n];
    for m in &chosen {
        if m.region_ids != first.region_ids {
            return Err(Error::Input(format!(
                "subject {} has a different region layout",
                m.subject_id
            )));
        }
        for (acc, s) in mean.iter_mut().zip(&m.scores) {
            *acc += s;
        }
    }
    let k = chosen.len() as f64;
    mean.iter_mut().for_each(|v| *v /= k);
    Ok(mean)
}

/// `(region_id, mean_score)` in ranking order.
pub type RankedRegions = Vec<(u32, f64)>;

/// The `k` highest scores; ties go to the lower region id.
pub fn top_k_regions(region_ids: &[u32], scores: &[f64], k: usize) -> Result<RankedRegions> {
    if k == 0 || k > scores.len() || region_ids.len() != scores.len() {
        return Err(Error::Input(format!(
            "cannot take top {k} of {} scores",
            scores.len()
        )));
    }
    let mut ranked: Vec<(u32, f64)> = region_ids.iter().copied().zip(scores.iter().copied()).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(ranked)
}

/// Aggregated importance and rankings for all contexts of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    pub maps: Vec<NodeImportanceMap>,
    pub importance: BTreeMap<ClassContext, BTreeMap<u32, f64>>,
    pub rankings: BTreeMap<ClassContext, RankedRegions>,
}

/// Explains every graph (in parallel) and aggregates per context.
pub fn explain_graphs(graphs: &[SubjectGraph], gat: &GAT, cfg: &ExplainConfig) -> Result<Explanation> {
    cfg.validate()?;
    let first = graphs
        .first()
        .ok_or_else(|| Error::Input("no graphs to explain".into()))?;
    if cfg.top_k > first.n() {
        return Err(Error::Config(format!(
            "explain.top_k {} exceeds the {} regions",
            cfg.top_k,
            first.n()
        )));
    }
    let maps = graphs
        .par_iter()
        .enumerate()
        .map(|(i, g)| explain_subject(g, gat, cfg, i as u64))
        .collect::<Result<Vec<_>>>()?;
    let mut importance = BTreeMap::new();
    let mut rankings = BTreeMap::new();
    for ctx in ClassContext::ALL {
        let mean = aggregate_importance(&maps, ctx)?;
        rankings.insert(ctx, top_k_regions(&first.region_ids, &mean, cfg.top_k)?);
        importance.insert(ctx, first.region_ids.iter().copied().zip(mean).collect());
    }
    Ok(Explanation {
        maps,
        importance,
        rankings,
    })
}

#[derive(Serialize)]
struct RankingRow {
    rank: usize,
    region_id: u32,
    mean_score: f64,
    class_context: ClassContext,
}

impl Explanation {
    /// Writes `importance.json` and `rankings.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("importance.json"), &self.importance)?;
        let path = dir.join("rankings.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(&path, io),
            other => Error::Input(format!("{other:?}")),
        })?;
        for (ctx, ranked) in &self.rankings {
            for (i, &(region_id, mean_score)) in ranked.iter().enumerate() {
                w.serialize(RankingRow {
                    rank: i + 1,
                    region_id,
                    mean_score,
                    class_context: *ctx,
                })?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gat::GATConfig;
    use crate::graph::build_graph;
    use crate::nn::gaussian;
    use crate::rng::stream;

    fn model(d: usize) -> GAT {
        let cfg = GATConfig {
            layers: 2,
            hidden: 4,
            heads: 2,
            dropout: 0.0,
            input_dim: d,
            ..GATConfig::default()
        };
        GAT::new(cfg, &mut stream(1, "gat", 0)).unwrap()
    }

    fn graph(seed: u64, label: u8) -> SubjectGraph {
        let ids: Vec<u32> = (1..=14).collect();
        build_graph(&gaussian(&mut stream(seed, "z", 0), 14 * 5, 1.0), 5, 10, &format!("s{seed}"), label, &ids)
            .unwrap()
    }

    fn map(label: u8, scores: Vec<f64>) -> NodeImportanceMap {
        NodeImportanceMap {
            subject_id: "s".into(),
            label,
            region_ids: (1..=scores.len() as u32).collect(),
            scores,
        }
    }

    #[test]
    fn no_steps_gives_uniform_importance() {
        let cfg = ExplainConfig {
            steps: 0,
            sparsity_weight: 0.0,
            ..ExplainConfig::default()
        };
        let m = explain_subject(&graph(2, 1), &model(5), &cfg, 0).unwrap();
        assert!(m.scores.iter().all(|&s| (s - 1.0 / 14.0).abs() < 1e-12));
    }

    #[test]
    fn all_ones_mask_is_the_plain_forward() {
        let gat = model(5);
        let g = graph(3, 0);
        assert_eq!(masked_logits(&gat, &g, &[1.0; 14]).unwrap(), gat.forward(&g).unwrap().logits);
    }

    #[test]
    fn scores_are_normalized_and_deterministic() {
        let cfg = ExplainConfig {
            steps: 30,
            init_jitter: 0.3,
            seed: 5,
            ..ExplainConfig::default()
        };
        let gat = model(5);
        let g = graph(4, 1);
        let a = explain_subject(&g, &gat, &cfg, 2).unwrap();
        assert_eq!(a, explain_subject(&g, &gat, &cfg, 2).unwrap());
        assert!((a.scores.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(a.scores.iter().all(|&s| (0.0..=1.0).contains(&s)));
    }

    #[test]
    fn mismatched_model_is_config_error() {
        assert!(matches!(
            explain_subject(&graph(7, 0), &model(4), &ExplainConfig::default(), 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn aggregation_examples() {
        let u = map(1, vec![0.2, 0.3, 0.5]);
        let v = map(0, vec![0.4, 0.4, 0.2]);
        let w = map(1, vec![0.1, 0.1, 0.8]);
        assert_eq!(aggregate_importance(&[u.clone()], ClassContext::Both).unwrap(), u.scores);
        let both = aggregate_importance(&[u.clone(), v.clone()], ClassContext::Both).unwrap();
        for (i, b) in both.iter().enumerate() {
            assert!((b - (u.scores[i] + v.scores[i]) / 2.0).abs() < 1e-15);
        }
        let all = [u, v, w];
        let mdd = aggregate_importance(&all, ClassContext::Mdd).unwrap();
        let hc = aggregate_importance(&all, ClassContext::Hc).unwrap();
        let both = aggregate_importance(&all, ClassContext::Both).unwrap();
        for i in 0..3 {
            assert!((both[i] - (2.0 * mdd[i] + hc[i]) / 3.0).abs() < 1e-12);
        }
        assert!(matches!(
            aggregate_importance(&all[..1], ClassContext::Hc),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn ranking_examples() {
        let ids = [5, 3, 9, 1];
        assert_eq!(
            top_k_regions(&ids, &[0.1, 0.4, 0.2, 0.3], 4).unwrap(),
            vec![(3, 0.4), (1, 0.3), (9, 0.2), (5, 0.1)]
        );
        assert_eq!(
            top_k_regions(&ids, &[0.25; 4], 2).unwrap(),
            vec![(1, 0.25), (3, 0.25)]
        );
        assert!(top_k_regions(&ids, &[0.25; 4], 5).is_err());
        assert!(top_k_regions(&ids, &[0.25; 4], 0).is_err());
    }

    #[test]
    fn ranking_matches_sort_oracle() {
        let mut rng = stream(9, "scores", 0);
        let scores: Vec<f64> = gaussian(&mut rng, 60, 1.0).iter().map(|&v| f64::from(v.abs())).collect();
        let ids: Vec<u32> = (0..60).map(|i| (i * 37 % 61) as u32).collect();
        let mut oracle: Vec<usize> = (0..60).collect();
        oracle.sort_by(|&a, &b| {
            scores[b].partial_cmp(&scores[a]).unwrap().then(ids[a].cmp(&ids[b]))
        });
        let got = top_k_regions(&ids, &scores, 10).unwrap();
        for (r, &i) in got.iter().zip(&oracle[..10]) {
            assert_eq!(*r, (ids[i], scores[i]));
        }
    }

    #[test]
    fn explanation_files() {
        let gat = model(5);
        let graphs = vec![graph(10, 1), graph(11, 0), graph(12, 1)];
        let cfg = ExplainConfig {
            steps: 5,
            top_k: 4,
            ..ExplainConfig::default()
        };
        let e = explain_graphs(&graphs, &gat, &cfg).unwrap();
        for scores in e.importance.values() {
            assert!((scores.values().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let dir = tempfile::tempdir().unwrap();
        e.write(dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("rankings.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "rank,region_id,mean_score,class_context");
        assert_eq!(lines.count(), 12);
        let json: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("importance.json")).unwrap())
                .unwrap();
        assert_eq!(json["MDD"].as_object().unwrap().len(), 14);
        assert!(json["both"]["1"].is_number());
    }
}
