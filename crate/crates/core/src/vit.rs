//! 3D Vision Transformer over region patches.
//!
//! Each patch is flattened and linearly embedded, a learned class token is
//! prepended and a learned position table added. Pre-norm encoder layers
//! follow, and the head reads the flattened final sequence. The final patch
//! rows are the region embeddings used to build subject graphs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::error::{Error, Result};
use crate::nn::{fan_in_uniform, gaussian, push_affine, Cursor};
use crate::rng::Rng;
use crate::tensor::{AdamState, ParamStore, Scalar, Tape, Var};
use crate::volume::io::{f32_to_bytes, read_f32_payload, read_json, write_bytes, write_json};
use crate::volume::payload_path;

const LN_EPS: f64 = 1e-5;
const TOKEN_STD: f64 = 0.02;
/// ln1 (2), q/k/v/out affine maps (8), ln2 (2), two MLP affine maps (4).
const LAYER_PARAMS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViTConfig {
    pub patch_side: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
    pub n_patches: usize,
    pub n_classes: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            patch_side: 32,
            embed_dim: 128,
            layers: 6,
            heads: 8,
            mlp_hidden: 512,
            dropout: 0.3,
            n_patches: 116,
            n_classes: 2,
        }
    }
}

impl ViTConfig {
    pub fn patch_len(&self) -> usize {
        self.patch_side.pow(3)
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn seq_len(&self) -> usize {
        self.n_patches + 1
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("patch_side", self.patch_side),
            ("embed_dim", self.embed_dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("mlp_hidden", self.mlp_hidden),
            ("n_patches", self.n_patches),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("vit.{name} must be positive")));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "vit.embed_dim {} is not divisible by vit.heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("vit.n_classes must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("vit.dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Fresh parameters in the order the forward pass consumes them.
pub fn init_params(cfg: &ViTConfig, rng: &mut Rng) -> Result<ParamStore<f32>> {
    cfg.validate()?;
    let (p, d) = (cfg.patch_len(), cfg.embed_dim);
    let mut s = ParamStore::new();
    s.push("embed", &[p, d], fan_in_uniform(rng, p, p * d));
    s.push("cls_token", &[1, d], gaussian(rng, d, TOKEN_STD));
    s.push("pos_embed", &[cfg.seq_len(), d], gaussian(rng, cfg.seq_len() * d, TOKEN_STD));
    for l in 0..cfg.layers {
        s.push(format!("layer{l}.ln1.gain"), &[d], vec![1.0; d]);
        s.push(format!("layer{l}.ln1.bias"), &[d], vec![0.0; d]);
        for name in ["query", "key", "value", "out"] {
            push_affine(&mut s, rng, &format!("layer{l}.{name}"), d, d);
        }
        s.push(format!("layer{l}.ln2.gain"), &[d], vec![1.0; d]);
        s.push(format!("layer{l}.ln2.bias"), &[d], vec![0.0; d]);
        push_affine(&mut s, rng, &format!("layer{l}.mlp1"), d, cfg.mlp_hidden);
        push_affine(&mut s, rng, &format!("layer{l}.mlp2"), cfg.mlp_hidden, d);
    }
    push_affine(&mut s, rng, "head", cfg.seq_len() * d, cfg.n_classes);
    Ok(s)
}

fn affine<F: Scalar>(tape: &mut Tape<F>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn drop<F: Scalar>(tape: &mut Tape<F>, x: Var, rate: f64, rng: &mut Option<&mut Rng>) -> Result<Var> {
    match rng {
        Some(r) => tape.dropout(x, rate, true, &mut **r),
        None => Ok(x),
    }
}

/// `[cls; patches·E] + E_pos`, shape `(N+1)×d`.
pub fn patch_embed<F: Scalar>(
    tape: &mut Tape<F>,
    cfg: &ViTConfig,
    embed: Var,
    cls: Var,
    pos: Var,
    patches: Var,
) -> Result<Var> {
    if tape.shape(patches) != [cfg.n_patches, cfg.patch_len()] {
        return Err(Error::Config(format!(
            "patches of shape {:?}, model expects [{}, {}]",
            tape.shape(patches),
            cfg.n_patches,
            cfg.patch_len()
        )));
    }
    let x = tape.matmul(patches, embed)?;
    let z = tape.concat_rows(&[cls, x])?;
    tape.add(z, pos)
}

/// One pre-norm layer. Returns the new sequence and each head's attention
/// matrix. `layer` holds the layer's parameters in registration order.
pub fn encoder_layer<F: Scalar>(
    tape: &mut Tape<F>,
    cfg: &ViTConfig,
    layer: &[Var],
    z: Var,
    rng: &mut Option<&mut Rng>,
) -> Result<(Var, Vec<Var>)> {
    if layer.len() != LAYER_PARAMS {
        return Err(Error::Config(format!(
            "encoder layer takes {LAYER_PARAMS} parameters, got {}",
            layer.len()
        )));
    }
    let dk = cfg.head_dim();
    let scale = F::lit(1.0 / (dk as f64).sqrt());
    let h = tape.layer_norm(z, layer[0], layer[1], F::lit(LN_EPS))?;
    let q = affine(tape, h, layer[2], layer[3])?;
    let k = affine(tape, h, layer[4], layer[5])?;
    let v = affine(tape, h, layer[6], layer[7])?;
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut attention = Vec::with_capacity(cfg.heads);
    for i in 0..cfg.heads {
        let qh = tape.slice_cols(q, i * dk, dk)?;
        let kh = tape.slice_cols(k, i * dk, dk)?;
        let vh = tape.slice_cols(v, i * dk, dk)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let a = tape.softmax(scores, 1)?;
        attention.push(a);
        heads.push(tape.matmul(a, vh)?);
    }
    let cat = tape.concat_cols(&heads)?;
    let o = affine(tape, cat, layer[8], layer[9])?;
    let o = drop(tape, o, cfg.dropout, rng)?;
    let z1 = tape.add(z, o)?;

    let h2 = tape.layer_norm(z1, layer[10], layer[11], F::lit(LN_EPS))?;
    let m = affine(tape, h2, layer[12], layer[13])?;
    let m = tape.gelu(m);
    let m = drop(tape, m, cfg.dropout, rng)?;
    let m = affine(tape, m, layer[14], layer[15])?;
    Ok((tape.add(z1, m)?, attention))
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ViTTrace {
    /// `[1 × n_classes]`, pre-softmax.
    pub logits: Var,
    /// Final-layer patch rows, `N×d`.
    pub region_embeddings: Var,
    pub cls_embedding: Var,
    /// Layer-major, head-minor attention matrices.
    pub attention: Vec<Var>,
}

/// Full forward. Dropout is active exactly when `rng` is given.
pub fn vit_forward<F: Scalar>(
    tape: &mut Tape<F>,
    cfg: &ViTConfig,
    params: &[Var],
    patches: Var,
    mut rng: Option<&mut Rng>,
) -> Result<ViTTrace> {
    let mut c = Cursor::new(params);
    let (embed, cls, pos) = (c.next()?, c.next()?, c.next()?);
    let z = patch_embed(tape, cfg, embed, cls, pos, patches)?;
    let mut z = drop(tape, z, cfg.dropout, &mut rng)?;
    let mut attention = Vec::with_capacity(cfg.layers * cfg.heads);
    let mut layer = Vec::with_capacity(LAYER_PARAMS);
    for _ in 0..cfg.layers {
        layer.clear();
        for _ in 0..LAYER_PARAMS {
            layer.push(c.next()?);
        }
        let (next, a) = encoder_layer(tape, cfg, &layer, z, &mut rng)?;
        z = next;
        attention.extend(a);
    }
    let (hw, hb) = (c.next()?, c.next()?);
    c.finish()?;
    let flat = tape.reshape(z, &[1, cfg.seq_len() * cfg.embed_dim])?;
    let logits = affine(tape, flat, hw, hb)?;
    Ok(ViTTrace {
        logits,
        region_embeddings: tape.slice_rows(z, 1, cfg.n_patches)?,
        cls_embedding: tape.slice_rows(z, 0, 1)?,
        attention,
    })
}

/// Mean cross-entropy of a batch of `(patches, label)` pairs on one tape.
pub fn batch_loss<F: Scalar>(
    tape: &mut Tape<F>,
    cfg: &ViTConfig,
    params: &[Var],
    batch: &[(&[F], usize)],
    mut rng: Option<&mut Rng>,
) -> Result<Var> {
    let mut logits = Vec::with_capacity(batch.len());
    for (patches, _) in batch {
        let x = tape.constant(&[cfg.n_patches, cfg.patch_len()], patches.to_vec())?;
        logits.push(vit_forward(tape, cfg, params, x, rng.as_deref_mut())?.logits);
    }
    let all = tape.concat_rows(&logits)?;
    let labels: Vec<usize> = batch.iter().map(|b| b.1).collect();
    tape.cross_entropy(all, &labels)
}

pub(crate) fn softmax_row(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f64> = logits.iter().map(|&v| f64::from(v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| (v / s) as f32).collect()
}

/// Eval-mode outputs of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct ViTOutput {
    pub logits: Vec<f32>,
    pub probabilities: Vec<f32>,
    pub region_embeddings: Vec<f32>,
    pub cls_embedding: Vec<f32>,
    pub attention: Vec<Vec<f32>>,
}

/// Affine standardization applied to raw patch intensities before the
/// embedding, fitted on training data only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputScaling {
    pub mean: f64,
    pub std: f64,
}

impl Default for InputScaling {
    fn default() -> Self {
        InputScaling { mean: 0.0, std: 1.0 }
    }
}

impl InputScaling {
    /// Mean and population standard deviation of every value; identity when
    /// the values are empty or constant.
    pub fn fit<'a>(samples: impl IntoIterator<Item = &'a [f32]>) -> Self {
        let (mut n, mut sum, mut sum2) = (0usize, 0.0f64, 0.0f64);
        for s in samples {
            for &v in s {
                let v = f64::from(v);
                n += 1;
                sum += v;
                sum2 += v * v;
            }
        }
        if n == 0 {
            return InputScaling::default();
        }
        let mean = sum / n as f64;
        let var = (sum2 / n as f64 - mean * mean).max(0.0);
        if var <= f64::EPSILON * mean.abs().max(1.0) {
            return InputScaling { mean, std: 1.0 };
        }
        InputScaling { mean, std: var.sqrt() }
    }

    pub fn apply(&self, x: &[f32]) -> Vec<f32> {
        x.iter().map(|&v| ((f64::from(v) - self.mean) / self.std) as f32).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViT {
    config: ViTConfig,
    scaling: InputScaling,
    params: ParamStore<f32>,
}

pub const CHECKPOINT_KIND: &str = "vit";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointConfig {
    model: ViTConfig,
    input_scaling: InputScaling,
}

impl ViT {
    pub fn new(config: ViTConfig, rng: &mut Rng) -> Result<Self> {
        let params = init_params(&config, rng)?;
        Ok(ViT {
            config,
            scaling: InputScaling::default(),
            params,
        })
    }

    /// Wraps existing parameters after checking them against the config.
    pub fn from_params(config: ViTConfig, params: ParamStore<f32>) -> Result<Self> {
        let reference = init_params(&config, &mut crate::rng::stream(0, "layout", 0))?;
        reference.check_layout(&params)?;
        Ok(ViT {
            config,
            scaling: InputScaling::default(),
            params,
        })
    }

    pub fn with_scaling(mut self, scaling: InputScaling) -> Result<Self> {
        if !(scaling.mean.is_finite() && scaling.std.is_finite() && scaling.std > 0.0) {
            return Err(Error::Config(format!("invalid input scaling {scaling:?}")));
        }
        self.scaling = scaling;
        Ok(self)
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn scaling(&self) -> InputScaling {
        self.scaling
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    /// Eval-mode forward pass on raw (unscaled) patches.
    pub fn forward(&self, patches: &[f32]) -> Result<ViTOutput> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let x = tape.constant(
            &[self.config.n_patches, self.config.patch_len()],
            self.scaling.apply(patches),
        )?;
        let t = vit_forward(&mut tape, &self.config, &vars, x, None)?;
        let logits = tape.value(t.logits).to_vec();
        Ok(ViTOutput {
            probabilities: softmax_row(&logits),
            logits,
            region_embeddings: tape.value(t.region_embeddings).to_vec(),
            cls_embedding: tape.value(t.cls_embedding).to_vec(),
            attention: t.attention.iter().map(|&a| tape.value(a).to_vec()).collect(),
        })
    }

    /// One Adam step on a batch of raw patches; returns the batch loss
    /// before the update.
    pub fn train_batch(
        &mut self,
        adam: &mut AdamState<f32>,
        batch: &[(&[f32], usize)],
        rng: &mut Rng,
    ) -> Result<f32> {
        let scaled: Vec<Vec<f32>> = batch.iter().map(|(x, _)| self.scaling.apply(x)).collect();
        let batch: Vec<(&[f32], usize)> = scaled.iter().zip(batch).map(|(x, b)| (x.as_slice(), b.1)).collect();
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let loss = batch_loss(&mut tape, &self.config, &vars, &batch, Some(rng))?;
        let value = tape.value(loss)[0];
        if !value.is_finite() {
            return Ok(value);
        }
        tape.backward(loss)?;
        let grads = self.params.grads(&tape, &vars);
        adam.step(&mut self.params, &grads)?;
        Ok(value)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let config = CheckpointConfig {
            model: self.config.clone(),
            input_scaling: self.scaling,
        };
        save_checkpoint(path, CHECKPOINT_KIND, &config, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (config, params): (CheckpointConfig, _) = load_checkpoint(path, CHECKPOINT_KIND)?;
        ViT::from_params(config.model, params)?.with_scaling(config.input_scaling)
    }
}

/// Per-subject region embeddings, `n × d` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionEmbeddings {
    pub subject_id: String,
    pub region_ids: Vec<u32>,
    pub d: usize,
    pub values: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingHeader {
    subject_id: String,
    #[serde(rename = "N")]
    n: usize,
    d: usize,
    region_ids: Vec<u32>,
}

impl RegionEmbeddings {
    pub fn n(&self) -> usize {
        self.region_ids.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(
            path,
            &EmbeddingHeader {
                subject_id: self.subject_id.clone(),
                n: self.n(),
                d: self.d,
                region_ids: self.region_ids.clone(),
            },
        )?;
        write_bytes(&payload_path(path), &f32_to_bytes(&self.values))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let h: EmbeddingHeader = read_json(path)?;
        if h.n != h.region_ids.len() {
            return Err(Error::format(path, 0, "N does not match region_ids"));
        }
        let values = read_f32_payload(&payload_path(path), h.n * h.d)?;
        Ok(RegionEmbeddings {
            subject_id: h.subject_id,
            region_ids: h.region_ids,
            d: h.d,
            values,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tensor::gradcheck::{check_params, GradCheckOptions};
    use crate::tensor::AdamConfig;

    fn tiny() -> ViTConfig {
        ViTConfig {
            patch_side: 3,
            embed_dim: 8,
            layers: 2,
            heads: 2,
            mlp_hidden: 32,
            dropout: 0.0,
            n_patches: 4,
            n_classes: 2,
        }
    }

    fn patches(cfg: &ViTConfig, seed: u64) -> Vec<f32> {
        gaussian(&mut stream(seed, "x", 0), cfg.n_patches * cfg.patch_len(), 1.0)
    }

    #[test]
    fn config_validation() {
        assert!(ViTConfig::default().validate().is_ok());
        assert_eq!(ViTConfig::default().patch_len(), 32768);
        assert_eq!(ViTConfig::default().head_dim(), 16);
        let bad = ViTConfig {
            heads: 3,
            ..tiny()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn zero_inputs_embed_to_zero() {
        let cfg = tiny();
        let mut t = Tape::<f64>::new();
        let p = cfg.patch_len();
        let e = t.variable(&[p, 8], vec![0.3; p * 8]).unwrap();
        let cls = t.variable(&[1, 8], vec![0.0; 8]).unwrap();
        let pos = t.variable(&[5, 8], vec![0.0; 40]).unwrap();
        let x = t.constant(&[4, p], vec![0.0; 4 * p]).unwrap();
        let z = patch_embed(&mut t, &cfg, e, cls, pos, x).unwrap();
        assert_eq!(t.shape(z), [5, 8]);
        assert!(t.value(z).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reference_geometry_embeds_to_117_rows() {
        let cfg = ViTConfig::default();
        let mut t = Tape::<f32>::new();
        let p = cfg.patch_len();
        let e = t.variable(&[p, 128], vec![1e-3; p * 128]).unwrap();
        let cls = t.variable(&[1, 128], vec![0.0; 128]).unwrap();
        let pos = t.variable(&[117, 128], vec![0.0; 117 * 128]).unwrap();
        let x = t.constant(&[116, p], vec![0.5; 116 * p]).unwrap();
        let z = patch_embed(&mut t, &cfg, e, cls, pos, x).unwrap();
        assert_eq!(t.shape(z), [117, 128]);
    }

    #[test]
    fn patch_embedding_is_linear() {
        let cfg = tiny();
        let p = cfg.patch_len();
        let mut rng = stream(3, "e", 0);
        let ev = gaussian(&mut rng, p * 8, 1.0);
        let mut xs = patches(&cfg, 4);
        let run = |xs: &[f32]| {
            let mut t = Tape::<f32>::new();
            let e = t.variable(&[p, 8], ev.clone()).unwrap();
            let cls = t.variable(&[1, 8], vec![0.0; 8]).unwrap();
            let pos = t.variable(&[5, 8], vec![0.0; 40]).unwrap();
            let x = t.constant(&[4, p], xs.to_vec()).unwrap();
            let z = patch_embed(&mut t, &cfg, e, cls, pos, x).unwrap();
            t.value(z).to_vec()
        };
        let before = run(&xs);
        for v in &mut xs[2 * p..3 * p] {
            *v *= 2.0;
        }
        let after = run(&xs);
        for j in 0..8 {
            assert!((after[3 * 8 + j] - 2.0 * before[3 * 8 + j]).abs() < 1e-5);
            assert_eq!(after[8 + j], before[8 + j]);
        }
    }

    #[test]
    fn patch_count_mismatch_is_config_error() {
        let cfg = tiny();
        let vit = ViT::new(cfg.clone(), &mut stream(1, "vit", 0)).unwrap();
        assert!(vit.forward(&vec![0.0; 3 * cfg.patch_len()]).is_err());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = tiny();
        let vit = ViT::new(cfg.clone(), &mut stream(2, "vit", 0)).unwrap();
        let out = vit.forward(&patches(&cfg, 5)).unwrap();
        assert_eq!(out.attention.len(), 4);
        for a in &out.attention {
            assert_eq!(a.len(), 25);
            for row in a.chunks(5) {
                let s: f64 = row.iter().map(|&v| f64::from(v)).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
        let s: f32 = out.probabilities.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_branches_pass_the_residual_through() {
        let cfg = tiny();
        let mut store = init_params(&cfg, &mut stream(3, "vit", 0)).unwrap();
        for p in store.iter_mut() {
            if p.name.contains(".out.") || p.name.contains(".mlp2.") {
                p.value.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut t = Tape::<f32>::new();
        let vars = store.bind(&mut t);
        let z = t.constant(&[5, 8], gaussian(&mut stream(4, "z", 0), 40, 1.0)).unwrap();
        let (out, _) = encoder_layer(&mut t, &cfg, &vars[3..3 + LAYER_PARAMS], z, &mut None).unwrap();
        assert_eq!(t.value(out), t.value(z));
    }

    #[test]
    fn shapes_of_cube_geometry() {
        let cfg = ViTConfig {
            patch_side: 2,
            layers: 1,
            n_patches: 36,
            dropout: 0.0,
            ..ViTConfig::default()
        };
        let vit = ViT::new(cfg.clone(), &mut stream(4, "vit", 0)).unwrap();
        let out = vit.forward(&vec![0.1; 36 * 8]).unwrap();
        assert_eq!(vit.params().get(vit.params().len() - 2).shape, [37 * 128, 2]);
        assert_eq!(out.region_embeddings.len(), 36 * 128);
        assert_eq!(out.cls_embedding.len(), 128);
        assert_eq!(out.logits.len(), 2);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = ViTConfig {
            dropout: 0.3,
            ..tiny()
        };
        let vit = ViT::new(cfg.clone(), &mut stream(5, "vit", 0)).unwrap();
        let x = patches(&cfg, 6);
        assert_eq!(vit.forward(&x).unwrap(), vit.forward(&x).unwrap());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = tiny();
        let store = init_params(&cfg, &mut stream(7, "vit", 0)).unwrap().cast::<f64>();
        let xs: Vec<Vec<f64>> = (0..2)
            .map(|s| patches(&cfg, 10 + s).iter().map(|&v| f64::from(v)).collect())
            .collect();
        let report = check_params(
            &store,
            |tape, vars| {
                let batch: Vec<(&[f64], usize)> =
                    xs.iter().enumerate().map(|(i, x)| (x.as_slice(), i)).collect();
                batch_loss(tape, &cfg, vars, &batch, None)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.checked, store.numel());
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn overfits_eight_subjects() {
        let cfg = ViTConfig {
            dropout: 0.0,
            ..tiny()
        };
        let mut vit = ViT::new(cfg.clone(), &mut stream(8, "vit", 0)).unwrap();
        let xs: Vec<Vec<f32>> = (0..8).map(|s| patches(&cfg, 20 + s)).collect();
        let batch: Vec<(&[f32], usize)> =
            xs.iter().enumerate().map(|(i, x)| (x.as_slice(), i % 2)).collect();
        let mut adam = AdamState::new(AdamConfig::with_lr(1e-3, 0.0), vit.params());
        let mut rng = stream(8, "drop", 0);
        let mut loss = f32::INFINITY;
        for _ in 0..500 {
            loss = vit.train_batch(&mut adam, &batch, &mut rng).unwrap();
            if loss < 0.01 {
                break;
            }
        }
        assert!(loss < 0.01, "final loss {loss}");
        assert!(vit.params().all_finite());
    }

    #[test]
    fn checkpoint_and_embedding_round_trip() {
        let cfg = tiny();
        let vit = ViT::new(cfg.clone(), &mut stream(9, "vit", 0))
            .unwrap()
            .with_scaling(InputScaling { mean: 0.3, std: 2.5 })
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vit.json");
        vit.save(&path).unwrap();
        let back = ViT::load(&path).unwrap();
        assert_eq!(back, vit);
        let x = patches(&cfg, 1);
        assert_eq!(back.forward(&x).unwrap(), vit.forward(&x).unwrap());

        let emb = RegionEmbeddings {
            subject_id: "sub-0001".into(),
            region_ids: vec![1, 2, 3, 4],
            d: 8,
            values: vit.forward(&x).unwrap().region_embeddings,
        };
        let epath = dir.path().join("emb.json");
        emb.save(&epath).unwrap();
        assert_eq!(RegionEmbeddings::load(&epath).unwrap(), emb);
        let header: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&epath).unwrap()).unwrap();
        assert_eq!(header["N"], 4);
    }

    #[test]
    fn scaling_is_applied_before_the_embedding() {
        let cfg = tiny();
        let plain = ViT::new(cfg.clone(), &mut stream(4, "vit", 0)).unwrap();
        let raw: Vec<f32> = patches(&cfg, 2).iter().map(|v| 5.0 + 3.0 * v).collect();
        let s = InputScaling::fit([raw.as_slice()]);
        let m = raw.iter().map(|&v| f64::from(v)).sum::<f64>() / raw.len() as f64;
        let sd = (raw.iter().map(|&v| (f64::from(v) - m).powi(2)).sum::<f64>() / raw.len() as f64).sqrt();
        assert!((s.mean - m).abs() < 1e-9 && (s.std - sd).abs() < 1e-6, "{s:?}");
        let scaled = plain.clone().with_scaling(s).unwrap();
        let pre: Vec<f32> = raw.iter().map(|&v| ((f64::from(v) - m) / sd) as f32).collect();
        let a = scaled.forward(&raw).unwrap().logits;
        let b = plain.forward(&pre).unwrap().logits;
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-4, "{a:?} vs {b:?}");
        }
        assert_eq!(InputScaling::fit([[2.0f32; 5].as_slice()]).std, 1.0);
        assert!(plain.with_scaling(InputScaling { mean: 0.0, std: 0.0 }).is_err());
    }
}
