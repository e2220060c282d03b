//! Graph attention classifier: stacked multi-head attention layers over each
//! node's neighborhood (self included), global average pooling and an
//! affine head.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::error::{Error, Result};
use crate::graph::SubjectGraph;
use crate::nn::{fan_in_uniform, push_affine, Cursor};
use crate::rng::Rng;
use crate::tensor::{AdamState, ParamStore, Scalar, Tape, Var};
use crate::vit::softmax_row;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GATConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub n_classes: usize,
    pub input_dim: usize,
}

impl Default for GATConfig {
    fn default() -> Self {
        GATConfig {
            layers: 3,
            hidden: 64,
            heads: 4,
            dropout: 0.3,
            leaky_slope: 0.2,
            n_classes: 2,
            input_dim: 128,
        }
    }
}

impl GATConfig {
    pub fn layer_width(&self) -> usize {
        self.hidden * self.heads
    }

    pub fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            self.layer_width()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("input_dim", self.input_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("gat.{name} must be positive")));
            }
        }
        if self.n_classes < 2 {
            return Err(Error::Config("gat.n_classes must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("gat.dropout {} not in [0, 1)", self.dropout)));
        }
        if !self.leaky_slope.is_finite() || self.leaky_slope < 0.0 {
            return Err(Error::Config("gat.leaky_slope must be non-negative".into()));
        }
        Ok(())
    }
}

pub fn init_params(cfg: &GATConfig, rng: &mut Rng) -> Result<ParamStore<f32>> {
    cfg.validate()?;
    let f = cfg.hidden;
    let mut s = ParamStore::new();
    for l in 0..cfg.layers {
        let fin = cfg.layer_input(l);
        for k in 0..cfg.heads {
            s.push(format!("layer{l}.head{k}.weight"), &[fin, f], fan_in_uniform(rng, fin, fin * f));
            s.push(format!("layer{l}.head{k}.attention"), &[2 * f, 1], fan_in_uniform(rng, 2 * f, 2 * f));
        }
    }
    push_affine(&mut s, rng, "head", cfg.layer_width(), cfg.n_classes);
    Ok(s)
}

/// One attention layer. Returns `N×(hidden·heads)` and each head's `N×N`
/// coefficient matrix.
pub fn gat_layer_forward<F: Scalar>(
    tape: &mut Tape<F>,
    cfg: &GATConfig,
    heads: &[(Var, Var)],
    mask: &[bool],
    h: Var,
) -> Result<(Var, Vec<Var>)> {
    let slope = F::lit(cfg.leaky_slope);
    let f = cfg.hidden;
    let mut outs = Vec::with_capacity(heads.len());
    let mut alphas = Vec::with_capacity(heads.len());
    for &(w, a) in heads {
        let wh = tape.matmul(h, w)?;
        let a_src = tape.slice_rows(a, 0, f)?;
        let a_dst = tape.slice_rows(a, f, f)?;
        let s_src = tape.matmul(wh, a_src)?;
        let s_dst = tape.matmul(wh, a_dst)?;
        let e = tape.add_outer(s_src, s_dst)?;
        let e = tape.leaky_relu(e, slope);
        let alpha = tape.masked_softmax(e, mask)?;
        alphas.push(alpha);
        let agg = tape.matmul(alpha, wh)?;
        outs.push(tape.leaky_relu(agg, slope));
    }
    Ok((tape.concat_cols(&outs)?, alphas))
}

#[derive(Debug, Clone)]
pub struct GATTrace {
    /// `[1 × n_classes]`, pre-softmax.
    pub logits: Var,
    pub pooled: Var,
    /// Layer-major, head-minor coefficient matrices.
    pub attention: Vec<Var>,
}

/// Forward over node features `x` (`N×input_dim`) with the neighborhood
/// `mask` (`N×N`, self-loops set). Dropout is active exactly when `rng` is
/// given.
pub fn gat_forward<F: Scalar>(
    tape: &mut Tape<F>,
    cfg: &GATConfig,
    params: &[Var],
    x: Var,
    mask: &[bool],
    mut rng: Option<&mut Rng>,
) -> Result<GATTrace> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != cfg.input_dim {
        return Err(Error::Config(format!(
            "node features of shape {shape:?}, model expects width {}",
            cfg.input_dim
        )));
    }
    let mut c = Cursor::new(params);
    let mut h = x;
    let mut attention = Vec::with_capacity(cfg.layers * cfg.heads);
    for _ in 0..cfg.layers {
        if let Some(r) = rng.as_deref_mut() {
            h = tape.dropout(h, cfg.dropout, true, r)?;
        }
        let mut heads = Vec::with_capacity(cfg.heads);
        for _ in 0..cfg.heads {
            heads.push((c.next()?, c.next()?));
        }
        let (out, a) = gat_layer_forward(tape, cfg, &heads, mask, h)?;
        h = out;
        attention.extend(a);
    }
    let (hw, hb) = (c.next()?, c.next()?);
    c.finish()?;
    let pooled = tape.mean_rows(h)?;
    let logits = tape.matmul(pooled, hw)?;
    let logits = tape.add_row(logits, hb)?;
    Ok(GATTrace {
        logits,
        pooled,
        attention,
    })
}

pub(crate) fn features<F: Scalar>(tape: &mut Tape<F>, g: &SubjectGraph) -> Result<Var> {
    tape.constant(
        &[g.n(), g.d],
        g.node_features.iter().map(|&v| F::lit(f64::from(v))).collect(),
    )
}

/// Mean cross-entropy over a batch of graphs on one tape.
pub fn batch_loss<F: Scalar>(
    tape: &mut Tape<F>,
    cfg: &GATConfig,
    params: &[Var],
    graphs: &[&SubjectGraph],
    mut rng: Option<&mut Rng>,
) -> Result<Var> {
    let mut logits = Vec::with_capacity(graphs.len());
    for g in graphs {
        let x = features(tape, g)?;
        let mask = g.neighborhood_mask();
        logits.push(gat_forward(tape, cfg, params, x, &mask, rng.as_deref_mut())?.logits);
    }
    let all = tape.concat_rows(&logits)?;
    let labels: Vec<usize> = graphs.iter().map(|g| usize::from(g.label)).collect();
    tape.cross_entropy(all, &labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GATOutput {
    pub logits: Vec<f32>,
    pub probabilities: Vec<f32>,
    pub attention: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GAT {
    config: GATConfig,
    params: ParamStore<f32>,
}

pub const CHECKPOINT_KIND: &str = "gat";

impl GAT {
    pub fn new(config: GATConfig, rng: &mut Rng) -> Result<Self> {
        let params = init_params(&config, rng)?;
        Ok(GAT { config, params })
    }

    pub fn from_params(config: GATConfig, params: ParamStore<f32>) -> Result<Self> {
        let reference = init_params(&config, &mut crate::rng::stream(0, "layout", 0))?;
        reference.check_layout(&params)?;
        Ok(GAT { config, params })
    }

    pub fn config(&self) -> &GATConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    pub fn forward(&self, g: &SubjectGraph) -> Result<GATOutput> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let x = features(&mut tape, g)?;
        let t = gat_forward(&mut tape, &self.config, &vars, x, &g.neighborhood_mask(), None)?;
        let logits = tape.value(t.logits).to_vec();
        Ok(GATOutput {
            probabilities: softmax_row(&logits),
            logits,
            attention: t.attention.iter().map(|&a| tape.value(a).to_vec()).collect(),
        })
    }

    /// One Adam step; returns the batch loss before the update.
    pub fn train_batch(
        &mut self,
        adam: &mut AdamState<f32>,
        graphs: &[&SubjectGraph],
        rng: &mut Rng,
    ) -> Result<f32> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let loss = batch_loss(&mut tape, &self.config, &vars, graphs, Some(rng))?;
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
        save_checkpoint(path, CHECKPOINT_KIND, &self.config, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (config, params) = load_checkpoint(path, CHECKPOINT_KIND)?;
        GAT::from_params(config, params)
    }
}
