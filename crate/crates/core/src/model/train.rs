use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::gat::{elu, elu_grad, gat_layer_backward, gat_layer_forward, LayerCache, NodeSet};
use super::loss::{class_weights, focal_loss, focal_loss_grad, softmax2};
use super::{GatModel, ModelParams};
use crate::error::{Error, Result};
use crate::eval::roc_auc;
use crate::features::KnockoutMode;
use crate::graph::{CandidatePair, WindowGraph};
use crate::par::{self, Exec};

/// A graph together with the node feature matrix the model reads.
#[derive(Debug, Clone)]
pub struct GraphInput<'a> {
    pub graph: &'a WindowGraph,
    pub x: Array2<f64>,
}

impl<'a> GraphInput<'a> {
    /// Stacks node features row by row, zeroing the segments `knockout` drops.
    pub fn from_graph(graph: &'a WindowGraph, knockout: KnockoutMode) -> Self {
        let dim = graph.feature_dim();
        let mut x = Array2::zeros((graph.nodes.len(), dim));
        for (mut row, node) in x.outer_iter_mut().zip(&graph.nodes) {
            let mut f = node.features.clone();
            knockout.apply(&mut f);
            row.assign(&Array1::from(f.0));
        }
        GraphInput { graph, x }
    }

    pub fn with_features(graph: &'a WindowGraph, x: Array2<f64>) -> Result<Self> {
        if x.nrows() != graph.nodes.len() {
            return Err(Error::Shape(format!(
                "{} feature rows for {} nodes",
                x.nrows(),
                graph.nodes.len()
            )));
        }
        Ok(GraphInput { graph, x })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }
}

/// A candidate pair addressed by graph index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PairRef {
    pub graph: usize,
    pub src: usize,
    pub dst: usize,
    pub label: u8,
}

impl PairRef {
    pub fn new(graph: usize, p: &CandidatePair) -> Self {
        PairRef {
            graph,
            src: p.src,
            dst: p.dst,
            label: p.label,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active; masks are drawn from a stream keyed by the step.
    Train { step: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Divide the summed loss by the batch size.
    Mean,
    Sum,
}

/// Forward state of one graph's share of a batch.
#[derive(Debug, Clone)]
pub struct GraphPass {
    pub graph: usize,
    /// Positions of this graph's pairs in the batch.
    pub pairs: Vec<usize>,
    pub targets: NodeSet,
    pub layer1_input: NodeSet,
    pub layer1: LayerCache,
    pub layer2: LayerCache,
    h0: Array2<f64>,
    h1: Array2<f64>,
    xp: Array2<f64>,
    /// Classifier hidden pre-activations, one row per pair.
    pub hidden_pre: Array2<f64>,
    hidden_keep: Option<Array2<f64>>,
    hidden: Array2<f64>,
    pub probs: Vec<[f64; 2]>,
}

#[derive(Debug, Clone)]
pub struct BatchForward {
    pub passes: Vec<GraphPass>,
    /// Class probabilities per pair, in batch order.
    pub probs: Vec<[f64; 2]>,
    pub loss: f64,
    scale: f64,
}

fn check_pairs(inputs: &[GraphInput<'_>], pairs: &[PairRef]) -> Result<()> {
    for p in pairs {
        let n = inputs.get(p.graph).map(|g| g.n()).ok_or_else(|| {
            Error::Consistency(format!("pair refers to graph {} of {}", p.graph, inputs.len()))
        })?;
        if p.src >= n || p.dst >= n {
            return Err(Error::Consistency(format!(
                "pair ({}, {}) refers to a node outside graph {} ({n} nodes)",
                p.src, p.dst, p.graph
            )));
        }
        if p.label > 1 {
            return Err(Error::Consistency(format!("pair label {} is not 0 or 1", p.label)));
        }
    }
    Ok(())
}

fn dropout_rng(seed: u64, step: u64, graph: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng.set_word_pos((graph as u128) << 40);
    rng
}

fn forward_graph(
    model: &GatModel,
    input: &GraphInput<'_>,
    graph: usize,
    idx: Vec<usize>,
    pairs: &[PairRef],
    mode: Mode,
) -> Result<GraphPass> {
    if input.x.ncols() != model.in_dim {
        return Err(Error::Shape(format!(
            "model expects {}-wide node features, graph {graph} has {}",
            model.in_dim,
            input.x.ncols()
        )));
    }
    let p = &model.params;
    let adj = input.graph.adjacency();
    let n = input.n();
    let targets = NodeSet::new(n, idx.iter().flat_map(|&i| [pairs[i].src, pairs[i].dst]));
    let s1 = targets.expand(adj);
    let s0 = s1.expand(adj);
    let h0 = input.x.select(Axis(0), s0.ids());

    let rate = model.config.dropout;
    let mut rng = match mode {
        Mode::Train { step } if rate > 0.0 => Some(dropout_rng(model.config.seed, step, graph)),
        _ => None,
    };
    fn drop(rate: f64, rng: &mut Option<ChaCha8Rng>) -> Option<(f64, &mut dyn rand::RngCore)> {
        rng.as_mut().map(|r| (rate, r as &mut dyn rand::RngCore))
    }

    let (h1, layer1) = gat_layer_forward(&p.layer1, &h0, &s0, &s1, adj, drop(rate, &mut rng))?;
    let (h2, layer2) = gat_layer_forward(&p.layer2, &h1, &s1, &targets, adj, drop(rate, &mut rng))?;

    let d = model.config.d_model;
    let mut xp = Array2::zeros((idx.len(), 2 * d));
    for (row, &i) in idx.iter().enumerate() {
        let a = targets.row(pairs[i].src).expect("pair node is a target");
        let b = targets.row(pairs[i].dst).expect("pair node is a target");
        xp.slice_mut(ndarray::s![row, ..d]).assign(&h2.row(a));
        xp.slice_mut(ndarray::s![row, d..]).assign(&h2.row(b));
    }
    let c = &p.classifier;
    let hidden_pre = xp.dot(&c.w1) + &c.b1;
    let mut hidden = hidden_pre.mapv(elu);
    let hidden_keep = rng.as_mut().map(|r| {
        let keep = Array2::from_shape_fn(hidden.dim(), |_| {
            if r.random::<f64>() < rate {
                0.0
            } else {
                1.0 / (1.0 - rate)
            }
        });
        hidden *= &keep;
        keep
    });
    let logits = hidden.dot(&c.w2) + &c.b2;
    let probs = logits.outer_iter().map(|l| softmax2([l[0], l[1]])).collect();

    Ok(GraphPass {
        graph,
        pairs: idx,
        targets,
        layer1_input: s0,
        layer1,
        layer2,
        h0,
        h1,
        xp,
        hidden_pre,
        hidden_keep,
        hidden,
        probs,
    })
}

fn backward_graph(
    model: &GatModel,
    pass: &GraphPass,
    pairs: &[PairRef],
    weights: [f64; 2],
    scale: f64,
) -> ModelParams {
    let p = &model.params;
    let gamma = model.config.gamma;
    let mut grad = p.zeros_like();

    let mut dlogits = Array2::zeros((pass.pairs.len(), 2));
    for (row, (&i, probs)) in pass.pairs.iter().zip(&pass.probs).enumerate() {
        let label = pairs[i].label as usize;
        let g = focal_loss_grad(*probs, label, weights[label], gamma);
        dlogits[[row, 0]] = scale * g[0];
        dlogits[[row, 1]] = scale * g[1];
    }

    let c = &p.classifier;
    let gc = &mut grad.classifier;
    gc.w2 += &pass.hidden.t().dot(&dlogits);
    gc.b2 += &dlogits.sum_axis(Axis(0));
    let mut dhid = dlogits.dot(&c.w2.t());
    if let Some(keep) = &pass.hidden_keep {
        dhid *= keep;
    }
    dhid.zip_mut_with(&pass.hidden_pre, |g, &x| *g *= elu_grad(x));
    gc.w1 += &pass.xp.t().dot(&dhid);
    gc.b1 += &dhid.sum_axis(Axis(0));
    let dxp = dhid.dot(&c.w1.t());

    let d = model.config.d_model;
    let mut dh2 = Array2::zeros((pass.targets.len(), d));
    for (row, &i) in pass.pairs.iter().enumerate() {
        let a = pass.targets.row(pairs[i].src).expect("pair node is a target");
        let b = pass.targets.row(pairs[i].dst).expect("pair node is a target");
        let mut ra = dh2.row_mut(a);
        ra += &dxp.slice(ndarray::s![row, ..d]);
        let mut rb = dh2.row_mut(b);
        rb += &dxp.slice(ndarray::s![row, d..]);
    }

    let dh1 = gat_layer_backward(&p.layer2, &pass.h1, &pass.layer2, &dh2, &mut grad.layer2, true)
        .expect("input gradient requested");
    gat_layer_backward(&p.layer1, &pass.h0, &pass.layer1, &dh1, &mut grad.layer1, false);
    grad
}

fn group_by_graph(pairs: &[PairRef]) -> Vec<(usize, Vec<usize>)> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        groups.entry(p.graph).or_default().push(i);
    }
    groups.into_iter().collect()
}

/// Scores `pairs` and computes the weighted focal loss, caching everything
/// [`backward_batch`] needs. `weights` are the per-class `alpha_t`.
pub fn forward_batch(
    model: &GatModel,
    inputs: &[GraphInput<'_>],
    pairs: &[PairRef],
    weights: [f64; 2],
    mode: Mode,
    reduction: Reduction,
    exec: Exec,
) -> Result<BatchForward> {
    check_pairs(inputs, pairs)?;
    let groups = group_by_graph(pairs);
    let passes = par::map(exec, &groups, |(g, idx)| {
        forward_graph(model, &inputs[*g], *g, idx.clone(), pairs, mode)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let scale = match reduction {
        Reduction::Mean if !pairs.is_empty() => 1.0 / pairs.len() as f64,
        _ => 1.0,
    };
    let mut probs = vec![[0.0; 2]; pairs.len()];
    let mut per_pair = vec![0.0; pairs.len()];
    for pass in &passes {
        for (&i, pr) in pass.pairs.iter().zip(&pass.probs) {
            probs[i] = *pr;
            let label = pairs[i].label as usize;
            per_pair[i] = focal_loss(*pr, label, weights[label], model.config.gamma);
        }
    }
    let loss = scale * per_pair.iter().sum::<f64>();
    Ok(BatchForward {
        passes,
        probs,
        loss,
        scale,
    })
}

/// Exact gradients of the loss computed by [`forward_batch`]. Per-graph
/// contributions are summed in graph order, so the result does not depend on
/// how the work was scheduled.
pub fn backward_batch(
    model: &GatModel,
    fwd: &BatchForward,
    pairs: &[PairRef],
    weights: [f64; 2],
    exec: Exec,
) -> ModelParams {
    let parts = par::map(exec, &fwd.passes, |pass| backward_graph(model, pass, pairs, weights, fwd.scale));
    let mut total = model.params.zeros_like();
    for g in &parts {
        total.add_scaled(g, 1.0);
    }
    total
}

/// Loss and gradient of one batch in a single call.
pub fn graph_loss_and_grad(
    model: &GatModel,
    inputs: &[GraphInput<'_>],
    pairs: &[PairRef],
    weights: [f64; 2],
    mode: Mode,
    reduction: Reduction,
    exec: Exec,
) -> Result<(f64, ModelParams)> {
    let fwd = forward_batch(model, inputs, pairs, weights, mode, reduction, exec)?;
    let grad = backward_batch(model, &fwd, pairs, weights, exec);
    Ok((fwd.loss, grad))
}

/// Eval-mode class probabilities for every pair.
pub fn predict_pairs(
    model: &GatModel,
    inputs: &[GraphInput<'_>],
    pairs: &[PairRef],
    exec: Exec,
) -> Result<Vec<[f64; 2]>> {
    forward_batch(model, inputs, pairs, [1.0, 1.0], Mode::Eval, Reduction::Sum, exec).map(|f| f.probs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictedLink {
    pub src: usize,
    pub dst: usize,
    pub score: f64,
}

/// Candidate pairs of one graph whose causal probability reaches `delta`.
pub fn predict_links(model: &GatModel, input: &GraphInput<'_>, delta: f64) -> Result<Vec<PredictedLink>> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Config(format!("threshold {delta} outside (0, 1)")));
    }
    let pairs: Vec<PairRef> = input.graph.candidate_pairs.iter().map(|p| PairRef::new(0, p)).collect();
    let probs = predict_pairs(model, std::slice::from_ref(input), &pairs, Exec::Sequential)?;
    Ok(pairs
        .iter()
        .zip(probs)
        .filter(|(_, pr)| pr[1] >= delta)
        .map(|(p, pr)| PredictedLink {
            src: p.src,
            dst: p.dst,
            score: pr[1],
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub adam: Adam,
    pub best_val_loss: f64,
    /// Consecutive epochs without a new best validation loss.
    pub wait: usize,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: GatModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub class_weights: [f64; 2],
    pub steps: u64,
}

/// Mean weighted focal loss and AUC over `pairs` in eval mode.
fn evaluate(
    model: &GatModel,
    inputs: &[GraphInput<'_>],
    pairs: &[PairRef],
    weights: [f64; 2],
    exec: Exec,
) -> Result<(f64, Option<f64>)> {
    let fwd = forward_batch(model, inputs, pairs, weights, Mode::Eval, Reduction::Mean, exec)?;
    let scores: Vec<f64> = fwd.probs.iter().map(|p| p[1]).collect();
    let labels: Vec<u8> = pairs.iter().map(|p| p.label).collect();
    let auc = match roc_auc(&scores, &labels) {
        Ok(a) => Some(a),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok((fwd.loss, auc))
}

/// Mini-batch training with early stopping on validation loss.
///
/// Each epoch reshuffles the training pairs with a generator seeded from the
/// config, so a fixed seed gives the same trajectory on any thread count.
pub fn train(
    model: GatModel,
    inputs: &[GraphInput<'_>],
    train_pairs: &[PairRef],
    val_pairs: &[PairRef],
    exec: Exec,
) -> Result<TrainOutcome> {
    model.validate()?;
    if train_pairs.is_empty() {
        return Err(Error::Config("no training pairs".into()));
    }
    if val_pairs.is_empty() {
        return Err(Error::Config("no validation pairs".into()));
    }
    check_pairs(inputs, train_pairs)?;
    check_pairs(inputs, val_pairs)?;

    let cfg = model.config.clone();
    let positives = train_pairs.iter().filter(|p| p.label == 1).count();
    let weights = class_weights([train_pairs.len() - positives, positives], cfg.class_weighting);

    let mut model = model;
    let mut best = model.clone();
    let mut state = TrainState {
        adam: Adam::new(&model.params, cfg.learning_rate),
        best_val_loss: f64::INFINITY,
        wait: 0,
        history: Vec::new(),
    };
    let mut best_epoch = 0;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed);
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    let mut batch = Vec::with_capacity(cfg.batch_size);

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train_pairs[i]));
            let mode = Mode::Train {
                step: state.adam.step + 1,
            };
            let (loss, grad) = graph_loss_and_grad(&model, inputs, &batch, weights, mode, Reduction::Mean, exec)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            state.adam.step(&mut model.params, &grad)?;
            epoch_loss += loss * batch.len() as f64;
        }
        let train_loss = epoch_loss / train_pairs.len() as f64;
        let (val_loss, val_auc) = evaluate(&model, inputs, val_pairs, weights, exec)?;
        state.history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_auc,
        });
        if val_loss < state.best_val_loss {
            state.best_val_loss = val_loss;
            state.wait = 0;
            best_epoch = epoch;
            best.params.clone_from(&model.params);
        } else {
            state.wait += 1;
            if state.wait >= cfg.patience {
                break;
            }
        }
    }

    Ok(TrainOutcome {
        model: best,
        history: state.history,
        best_epoch,
        best_val_loss: state.best_val_loss,
        class_weights: weights,
        steps: state.adam.step,
    })
}
