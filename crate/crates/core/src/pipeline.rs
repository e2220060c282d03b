//! Cross-validated two-stage training: per fold, a ViT is trained on the
//! training split, its region embeddings become subject graphs, a GAT is
//! trained on the training graphs and evaluated on the held-out ones.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, TrainingConfig, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::eval::{
    aggregate_folds, compute_metrics, stratified_k_fold, ConfusionMatrix, FoldPlan, MetricRecord,
    MetricsReport,
};
use crate::explain::{explain_graphs, ExplainConfig, Explanation};
use crate::extract::{expected_patch_count, extract_subject, PatchSet, Strategy};
use crate::gat::GAT;
use crate::graph::{build_graph, SubjectGraph};
use crate::rng::{stream, Rng};
use crate::tensor::AdamState;
use crate::vit::{InputScaling, RegionEmbeddings, ViT};
use crate::volume::io::{read_json, write_json};
use crate::volume::{SubjectRecord, VolumeSource};

/// Receives human-readable progress lines.
pub type Progress<'a> = Option<&'a (dyn Fn(&str) + Sync)>;

fn report(progress: Progress<'_>, msg: impl AsRef<str>) {
    if let Some(p) = progress {
        p(msg.as_ref());
    }
}

/// Patches of every subject, extracted once per run.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub subjects: Vec<SubjectRecord>,
    pub patches: Vec<PatchSet>,
    pub strategy: Strategy,
}

impl PreparedData {
    pub fn labels(&self) -> Vec<u8> {
        self.subjects.iter().map(|s| s.label).collect()
    }

    pub fn n_regions(&self) -> usize {
        self.patches.first().map_or(0, PatchSet::n)
    }

    pub fn region_ids(&self) -> &[u32] {
        self.patches.first().map_or(&[], |p| &p.region_ids)
    }
}

pub fn prepare(source: &dyn VolumeSource, cfg: &RunConfig) -> Result<PreparedData> {
    let subjects = source.subjects().to_vec();
    if subjects.is_empty() {
        return Err(Error::Input("the cohort has no subjects".into()));
    }
    let ex = &cfg.extraction;
    if ex.strategy == Strategy::Atlas && source.atlas().is_none() {
        return Err(Error::Config("atlas strategy requires a dataset atlas".into()));
    }
    let patches = (0..subjects.len())
        .into_par_iter()
        .map(|i| {
            let vol = source.load(i)?;
            extract_subject(
                &vol,
                source.atlas(),
                &subjects[i].id,
                ex.strategy,
                ex.working_dims,
                &ex.options(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let expected = expected_patch_count(ex.strategy, source.atlas(), ex.working_dims, ex.patch_side);
    if patches.iter().any(|p| Some(p.n()) != expected) {
        return Err(Error::Input("subjects yield different patch counts".into()));
    }
    Ok(PreparedData {
        subjects,
        patches,
        strategy: ex.strategy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub subject_id: String,
    pub label: u8,
    pub predicted: u8,
    pub p_positive: f32,
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold: usize,
    pub vit: ViT,
    pub gat: GAT,
    /// One graph per subject, in manifest order.
    pub graphs: Vec<SubjectGraph>,
    pub predictions: Vec<Prediction>,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricRecord,
    pub explanation: Explanation,
    pub vit_epoch_loss: Vec<f32>,
    pub gat_epoch_loss: Vec<f32>,
}

/// Seeded-shuffle minibatch training with divergence detection. Returns the
/// mean loss of each epoch.
fn train_stage(
    n: usize,
    training: &TrainingConfig,
    rng: &mut Rng,
    fold: usize,
    stage: &'static str,
    mut step: impl FnMut(&[usize], &mut Rng) -> Result<f32>,
) -> Result<Vec<f32>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut losses = Vec::with_capacity(training.epochs);
    let mut global = 0;
    for _ in 0..training.epochs {
        order.shuffle(rng);
        let mut total = 0.0f64;
        for batch in order.chunks(training.batch_size) {
            let loss = step(batch, rng)?;
            if !loss.is_finite() {
                return Err(Error::NumericDivergence {
                    fold,
                    stage,
                    step: global,
                    loss: f64::from(loss),
                });
            }
            total += f64::from(loss) * batch.len() as f64;
            global += 1;
        }
        losses.push((total / n as f64) as f32);
    }
    Ok(losses)
}

fn argmax_positive(p_positive: f32) -> u8 {
    u8::from(p_positive > 0.5)
}

pub fn train_fold(
    data: &PreparedData,
    plan: &FoldPlan,
    fold: usize,
    cfg: &RunConfig,
    progress: Progress<'_>,
) -> Result<FoldOutcome> {
    let train = plan.train_indices(fold);
    let test = plan.test_indices(fold);
    let seed = cfg.eval.seed;

    let mut rng = stream(seed, "vit", fold as u64);
    let scaling = InputScaling::fit(train.iter().map(|&s| data.patches[s].data()));
    let mut vit = ViT::new(cfg.vit_model(data.n_regions()), &mut rng)?.with_scaling(scaling)?;
    let mut adam = AdamState::new(cfg.vit.training.adam(), vit.params());
    let vit_epoch_loss = train_stage(train.len(), &cfg.vit.training, &mut rng, fold, "vit", |b, r| {
        let batch: Vec<(&[f32], usize)> = b
            .iter()
            .map(|&i| {
                let s = train[i];
                (data.patches[s].data(), usize::from(data.subjects[s].label))
            })
            .collect();
        vit.train_batch(&mut adam, &batch, r)
    })?;
    report(progress, format!("fold {fold}: vit trained, final loss {:?}", vit_epoch_loss.last()));

    let k = cfg.graph.k;
    let graphs = data
        .patches
        .par_iter()
        .zip(&data.subjects)
        .map(|(p, s)| {
            let out = vit.forward(p.data())?;
            build_graph(
                &out.region_embeddings,
                vit.config().embed_dim,
                k,
                &s.id,
                s.label,
                &p.region_ids,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = stream(seed, "gat", fold as u64);
    let mut gat = GAT::new(cfg.gat_model(), &mut rng)?;
    let mut adam = AdamState::new(cfg.gat.training.adam(), gat.params());
    let gat_epoch_loss = train_stage(train.len(), &cfg.gat.training, &mut rng, fold, "gat", |b, r| {
        let batch: Vec<&SubjectGraph> = b.iter().map(|&i| &graphs[train[i]]).collect();
        gat.train_batch(&mut adam, &batch, r)
    })?;
    report(progress, format!("fold {fold}: gat trained, final loss {:?}", gat_epoch_loss.last()));

    let predictions = test
        .par_iter()
        .map(|&i| {
            let g = &graphs[i];
            let p = gat.forward(g)?.probabilities[1];
            Ok(Prediction {
                subject_id: g.subject_id.clone(),
                label: g.label,
                predicted: argmax_positive(p),
                p_positive: p,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let confusion = ConfusionMatrix::from_pairs(predictions.iter().map(|p| (p.label, p.predicted)));
    let metrics = compute_metrics(&confusion)?;
    report(progress, format!("fold {fold}: accuracy {:.4}", metrics.accuracy));

    let test_graphs: Vec<SubjectGraph> = test.iter().map(|&i| graphs[i].clone()).collect();
    let explanation = explain_graphs(&test_graphs, &gat, &cfg.explain)?;

    Ok(FoldOutcome {
        fold,
        vit,
        gat,
        graphs,
        predictions,
        confusion,
        metrics,
        explanation,
        vit_epoch_loss,
        gat_epoch_loss,
    })
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub plan: FoldPlan,
    pub folds: Vec<FoldOutcome>,
    pub report: MetricsReport,
}

/// Runs every fold, at most `jobs` at a time.
pub fn run_cross_validation(
    data: &PreparedData,
    cfg: &RunConfig,
    jobs: usize,
    progress: Progress<'_>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let plan = stratified_k_fold(&data.labels(), cfg.eval.folds, cfg.eval.seed)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))?;
    let folds = pool.install(|| {
        (0..plan.k)
            .into_par_iter()
            .map(|f| train_fold(data, &plan, f, cfg, progress))
            .collect::<Result<Vec<_>>>()
    })?;
    let records: Vec<MetricRecord> = folds.iter().map(|f| f.metrics).collect();
    let report = aggregate_folds(&records)?;
    Ok(RunOutcome {
        plan,
        folds,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMetadata {
    pub schema_version: String,
    pub strategy: Strategy,
    pub n_regions: usize,
    pub n_subjects: usize,
    pub folds: usize,
    pub region_ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldAssignments {
    pub k: usize,
    pub seed: u64,
    pub subject_ids: Vec<String>,
    pub assignments: Vec<usize>,
}

#[derive(Serialize)]
struct TrainingLog<'a> {
    vit_epoch_loss: &'a [f32],
    gat_epoch_loss: &'a [f32],
}

pub fn fold_dir(run_dir: &Path, fold: usize) -> PathBuf {
    run_dir.join(format!("fold_{fold:02}"))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the run directory.
pub fn write_run(out_dir: &Path, cfg: &RunConfig, data: &PreparedData, run: &RunOutcome) -> Result<()> {
    write_json(&out_dir.join("config.json"), cfg)?;
    write_json(
        &out_dir.join("metadata.json"),
        &RunMetadata {
            schema_version: SCHEMA_VERSION.into(),
            strategy: data.strategy,
            n_regions: data.n_regions(),
            n_subjects: data.subjects.len(),
            folds: run.plan.k,
            region_ids: data.region_ids().to_vec(),
        },
    )?;
    write_json(
        &out_dir.join("folds.json"),
        &FoldAssignments {
            k: run.plan.k,
            seed: run.plan.seed,
            subject_ids: data.subjects.iter().map(|s| s.id.clone()).collect(),
            assignments: run.plan.assignments.clone(),
        },
    )?;
    write_json(&out_dir.join("metrics.json"), &run.report)?;
    for f in &run.folds {
        let dir = fold_dir(out_dir, f.fold);
        f.vit.save(&dir.join("vit.json"))?;
        f.gat.save(&dir.join("gat.json"))?;
        for g in &f.graphs {
            g.save(&dir.join("graphs").join(format!("{}.json", g.subject_id)))?;
            RegionEmbeddings {
                subject_id: g.subject_id.clone(),
                region_ids: g.region_ids.clone(),
                d: g.d,
                values: g.node_features.clone(),
            }
            .save(&dir.join("embeddings").join(format!("{}.json", g.subject_id)))?;
        }
        write_csv(&dir.join("predictions.csv"), &f.predictions)?;
        write_json(
            &dir.join("training.json"),
            &TrainingLog {
                vit_epoch_loss: &f.vit_epoch_loss,
                gat_epoch_loss: &f.gat_epoch_loss,
            },
        )?;
        f.explanation.write(&dir)?;
    }
    Ok(())
}

pub fn load_metrics(run_dir: &Path) -> Result<MetricsReport> {
    read_json(&run_dir.join("metrics.json"))
}

/// Re-explains a fold of a finished run from its stored GAT and graphs.
pub fn explain_run_fold(run_dir: &Path, fold: usize, cfg: &ExplainConfig) -> Result<Explanation> {
    let folds: FoldAssignments = read_json(&run_dir.join("folds.json"))?;
    if fold >= folds.k {
        return Err(Error::Input(format!("fold {fold} out of range for {} folds", folds.k)));
    }
    let dir = fold_dir(run_dir, fold);
    let gat = GAT::load(&dir.join("gat.json"))?;
    let graphs = folds
        .subject_ids
        .iter()
        .zip(&folds.assignments)
        .filter(|(_, &f)| f == fold)
        .map(|(id, _)| SubjectGraph::load(&dir.join("graphs").join(format!("{id}.json"))))
        .collect::<Result<Vec<_>>>()?;
    explain_graphs(&graphs, &gat, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{generate_synthetic_dataset, SyntheticParams};

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.dataset = SyntheticParams {
            n_subjects: 24,
            dims: [24, 28, 24],
            n_rois: 14,
            signal_rois: vec![2, 5],
            effect_size: 1.5,
            seed: 11,
            ..SyntheticParams::default()
        };
        cfg.extraction.patch_side = 4;
        cfg.extraction.working_dims = [8, 12, 8];
        cfg.vit.model.embed_dim = 8;
        cfg.vit.model.layers = 1;
        cfg.vit.model.heads = 2;
        cfg.vit.model.mlp_hidden = 16;
        cfg.vit.training.epochs = 2;
        cfg.vit.training.learning_rate = 1e-3;
        cfg.gat.model.hidden = 4;
        cfg.gat.model.heads = 2;
        cfg.gat.training.epochs = 2;
        cfg.eval.folds = 3;
        cfg.explain.steps = 3;
        cfg
    }

    #[test]
    fn folds_write_the_documented_layout() {
        let cfg = tiny_config();
        let ds = generate_synthetic_dataset(&cfg.dataset).unwrap();
        let data = prepare(&ds, &cfg).unwrap();
        assert_eq!(data.n_regions(), 14);
        let run = run_cross_validation(&data, &cfg, 1, None).unwrap();
        assert_eq!(run.folds.len(), 3);
        let dir = tempfile::tempdir().unwrap();
        write_run(dir.path(), &cfg, &data, &run).unwrap();
        for f in ["config.json", "metadata.json", "metrics.json", "folds.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let fold = fold_dir(dir.path(), 1);
        for f in ["vit.json", "vit.bin", "gat.json", "gat.bin", "predictions.csv", "rankings.csv", "importance.json"] {
            assert!(fold.join(f).exists(), "{f}");
        }
        let csv = std::fs::read_to_string(fold.join("predictions.csv")).unwrap();
        assert!(csv.starts_with("subject_id,label,predicted,p_positive\n"));
        assert_eq!(csv.lines().count(), 1 + run.plan.test_indices(1).len());
        assert_eq!(load_metrics(dir.path()).unwrap(), run.report);

        let again = explain_run_fold(dir.path(), 1, &cfg.explain).unwrap();
        assert_eq!(again, run.folds[1].explanation);

        // Accuracy recomputed from the prediction log.
        for f in &run.folds {
            let right = f.predictions.iter().filter(|p| p.label == p.predicted).count();
            assert_eq!(f.metrics.accuracy, right as f64 / f.predictions.len() as f64);
        }
    }

    #[test]
    fn cube_strategy_uses_grid_count() {
        let mut cfg = tiny_config();
        cfg.extraction.strategy = Strategy::Cube;
        let ds = generate_synthetic_dataset(&cfg.dataset).unwrap();
        let data = prepare(&ds, &cfg).unwrap();
        assert_eq!(data.n_regions(), 2 * 3 * 2);
    }

    #[test]
    fn divergence_reports_fold_and_step() {
        let training = TrainingConfig {
            epochs: 2,
            batch_size: 2,
            ..TrainingConfig::default()
        };
        let mut calls = 0;
        let err = train_stage(6, &training, &mut stream(0, "t", 0), 4, "gat", |_, _| {
            calls += 1;
            Ok(if calls == 5 { f32::NAN } else { 1.0 })
        })
        .unwrap_err();
        assert!(matches!(err, Error::NumericDivergence { fold: 4, stage: "gat", step: 4, .. }));
    }
}
