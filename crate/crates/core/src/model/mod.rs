//! Two-layer multi-head graph attention network with a pair classifier.
//!
//! Layer 1 concatenates its heads, layer 2 averages them; both add a residual
//! (a learned projection when widths differ, identity otherwise). Ordered event
//! pairs are scored by an MLP over `[h_i ‖ h_j]` and trained with focal loss.
//! All gradients are computed by hand.

mod adam;
mod checkpoint;
mod gat;
mod loss;
mod train;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adam::Adam;
pub use checkpoint::{Checkpoint, NamedTensor, CHECKPOINT_VERSION};
pub use gat::{
    attention_coefficients, elu, elu_grad, gat_layer_backward, gat_layer_forward, gat_layer_forward_full, leaky_relu,
    LayerCache, NodeSet, LEAKY_SLOPE,
};
pub use loss::{class_weights, focal_loss, focal_loss_grad, softmax2, P_FLOOR};
pub use train::{
    backward_batch, forward_batch, graph_loss_and_grad, predict_links, predict_pairs, train, BatchForward, EpochRecord, GraphInput,
    GraphPass, Mode, PairRef, PredictedLink, Reduction, TrainOutcome, TrainState,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    /// Per-class weight `1/frequency`, rescaled to mean 1.
    #[default]
    InverseFrequency,
    /// `alpha_t = 1` for both classes.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub dropout: f64,
    pub gamma: f64,
    pub class_weighting: ClassWeighting,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Minimum causal-class probability for a predicted link.
    pub threshold: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            heads: 4,
            dropout: 0.1,
            gamma: 2.0,
            class_weighting: ClassWeighting::InverseFrequency,
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            threshold: 0.5,
            seed: 42,
        }
    }
}

impl ModelConfig {
    /// Full-scale dimensions: 256 wide, 16 heads.
    pub fn full_scale() -> Self {
        ModelConfig {
            d_model: 256,
            heads: 16,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("model.{m}")));
        if self.d_model == 0 || self.heads == 0 {
            return fail("d_model and model.heads must be positive");
        }
        if self.d_model % self.heads != 0 {
            return fail("d_model must be divisible by model.heads");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return fail("gamma must be non-negative");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return fail("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return fail("batch_size and model.max_epochs must be positive");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return fail("threshold must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }
}

/// One attention layer. `w` stacks the per-head projections column-wise
/// (`d_in × heads·d_head`); row `k` of `attn` is head `k`'s attention vector,
/// the first `d_head` entries scoring the receiving node and the rest the
/// sender.
#[derive(Debug, Clone, PartialEq)]
pub struct GatLayerParams {
    pub heads: usize,
    pub d_head: usize,
    pub concat: bool,
    pub w: Array2<f64>,
    pub attn: Array2<f64>,
    /// Residual projection `d_in × d_out`; identity when `None`.
    pub proj: Option<Array2<f64>>,
}

impl GatLayerParams {
    pub fn zeros(d_in: usize, heads: usize, d_head: usize, concat: bool) -> Self {
        let d_out = if concat { heads * d_head } else { d_head };
        GatLayerParams {
            heads,
            d_head,
            concat,
            w: Array2::zeros((d_in, heads * d_head)),
            attn: Array2::zeros((heads, 2 * d_head)),
            proj: (d_in != d_out).then(|| Array2::zeros((d_in, d_out))),
        }
    }

    pub fn glorot<R: Rng + ?Sized>(d_in: usize, heads: usize, d_head: usize, concat: bool, rng: &mut R) -> Self {
        let mut p = Self::zeros(d_in, heads, d_head, concat);
        glorot_fill(&mut p.w, d_in, d_head, rng);
        glorot_fill(&mut p.attn, 2 * d_head, 1, rng);
        if let Some(proj) = &mut p.proj {
            let (r, c) = proj.dim();
            glorot_fill(proj, r, c, rng);
        }
        p
    }

    pub fn d_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn d_out(&self) -> usize {
        if self.concat {
            self.heads * self.d_head
        } else {
            self.d_head
        }
    }

    fn check(&self, name: &str) -> Result<()> {
        let hd = self.heads * self.d_head;
        if self.w.ncols() != hd || self.attn.dim() != (self.heads, 2 * self.d_head) {
            return Err(Error::Shape(format!("{name}: head dimensions do not match weights")));
        }
        match &self.proj {
            Some(p) if p.dim() != (self.d_in(), self.d_out()) => {
                Err(Error::Shape(format!("{name}: residual projection is {:?}", p.dim())))
            }
            None if self.d_in() != self.d_out() => Err(Error::Shape(format!(
                "{name}: identity residual needs d_in == d_out, got {} and {}",
                self.d_in(),
                self.d_out()
            ))),
            _ => Ok(()),
        }
    }
}

/// `[h_i ‖ h_j] → ELU(· W1 + b1) → · W2 + b2`, two logits (non-causal, causal).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl ClassifierParams {
    pub fn zeros(d_model: usize, hidden: usize) -> Self {
        ClassifierParams {
            w1: Array2::zeros((2 * d_model, hidden)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((hidden, 2)),
            b2: Array1::zeros(2),
        }
    }

    pub fn glorot<R: Rng + ?Sized>(d_model: usize, hidden: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(d_model, hidden);
        glorot_fill(&mut p.w1, 2 * d_model, hidden, rng);
        glorot_fill(&mut p.w2, hidden, 2, rng);
        p
    }
}

/// Every trainable tensor. Gradients and Adam moments use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layer1: GatLayerParams,
    pub layer2: GatLayerParams,
    pub classifier: ClassifierParams,
}

impl ModelParams {
    pub fn zeros(in_dim: usize, cfg: &ModelConfig) -> Self {
        ModelParams {
            layer1: GatLayerParams::zeros(in_dim, cfg.heads, cfg.d_head(), true),
            layer2: GatLayerParams::zeros(cfg.d_model, cfg.heads, cfg.d_model, false),
            classifier: ClassifierParams::zeros(cfg.d_model, cfg.d_model),
        }
    }

    pub fn glorot<R: Rng + ?Sized>(in_dim: usize, cfg: &ModelConfig, rng: &mut R) -> Self {
        ModelParams {
            layer1: GatLayerParams::glorot(in_dim, cfg.heads, cfg.d_head(), true, rng),
            layer2: GatLayerParams::glorot(cfg.d_model, cfg.heads, cfg.d_model, false, rng),
            classifier: ClassifierParams::glorot(cfg.d_model, cfg.d_model, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.slices_mut().into_iter().for_each(|s| s.fill(0.0));
        z
    }

    /// Tensor names in a fixed order, matching [`slices`](Self::slices).
    pub fn names(&self) -> Vec<&'static str> {
        let mut n = vec!["layer1.w", "layer1.attn"];
        if self.layer1.proj.is_some() {
            n.push("layer1.proj");
        }
        n.extend(["layer2.w", "layer2.attn"]);
        if self.layer2.proj.is_some() {
            n.push("layer2.proj");
        }
        n.extend(["classifier.w1", "classifier.b1", "classifier.w2", "classifier.b2"]);
        n
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let mut s = Vec::new();
        for l in [&self.layer1, &self.layer2] {
            s.push(l.w.shape().to_vec());
            s.push(l.attn.shape().to_vec());
            if let Some(p) = &l.proj {
                s.push(p.shape().to_vec());
            }
        }
        let c = &self.classifier;
        s.extend([c.w1.shape().to_vec(), c.b1.shape().to_vec(), c.w2.shape().to_vec(), c.b2.shape().to_vec()]);
        s
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in [&self.layer1, &self.layer2] {
            out.push(l.w.as_slice().expect("standard layout"));
            out.push(l.attn.as_slice().expect("standard layout"));
            if let Some(p) = &l.proj {
                out.push(p.as_slice().expect("standard layout"));
            }
        }
        let c = &self.classifier;
        out.push(c.w1.as_slice().expect("standard layout"));
        out.push(c.b1.as_slice().expect("standard layout"));
        out.push(c.w2.as_slice().expect("standard layout"));
        out.push(c.b2.as_slice().expect("standard layout"));
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in [&mut self.layer1, &mut self.layer2] {
            out.push(l.w.as_slice_mut().expect("standard layout"));
            out.push(l.attn.as_slice_mut().expect("standard layout"));
            if let Some(p) = &mut l.proj {
                out.push(p.as_slice_mut().expect("standard layout"));
            }
        }
        let c = &mut self.classifier;
        out.push(c.w1.as_slice_mut().expect("standard layout"));
        out.push(c.b1.as_slice_mut().expect("standard layout"));
        out.push(c.w2.as_slice_mut().expect("standard layout"));
        out.push(c.b2.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.slices().iter().flat_map(|s| s.iter()).fold(0.0, |m, x| m.max(x.abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatModel {
    pub config: ModelConfig,
    pub in_dim: usize,
    pub params: ModelParams,
}

impl GatModel {
    /// Glorot-initialised model for `in_dim`-wide node features.
    pub fn new(in_dim: usize, config: ModelConfig) -> Result<Self> {
        use rand::SeedableRng;
        config.validate()?;
        if in_dim == 0 {
            return Err(Error::Config("node feature dimension must be positive".into()));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
        let params = ModelParams::glorot(in_dim, &config, &mut rng);
        Ok(GatModel { config, in_dim, params })
    }

    /// Checks that every tensor has the shape implied by the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expect = ModelParams::zeros(self.in_dim, &self.config);
        if expect.shapes() != self.params.shapes() {
            return Err(Error::Shape(format!(
                "parameter shapes {:?} do not match config (expected {:?})",
                self.params.shapes(),
                expect.shapes()
            )));
        }
        self.params.layer1.check("layer1")?;
        self.params.layer2.check("layer2")?;
        if !self.params.all_finite() {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(())
    }
}

fn glorot_fill<R: Rng + ?Sized>(a: &mut Array2<f64>, fan_in: usize, fan_out: usize, rng: &mut R) {
    let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    a.iter_mut().for_each(|x| *x = rng.random_range(-limit..=limit));
}
