use ndarray::{Array2, Axis};
use rand::{Rng, RngCore};

use super::GatLayerParams;
use crate::error::{Error, Result};
use crate::graph::Adjacency;

pub const LEAKY_SLOPE: f64 = 0.2;

#[inline]
pub fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

#[inline]
pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

#[inline]
pub fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// A sorted subset of a graph's nodes with an id-to-row lookup.
#[derive(Debug, Clone)]
pub struct NodeSet {
    ids: Vec<usize>,
    pos: Vec<usize>,
}

impl NodeSet {
    pub fn new(n: usize, ids: impl IntoIterator<Item = usize>) -> Self {
        let mut pos = vec![usize::MAX; n];
        for id in ids {
            pos[id] = 0;
        }
        let mut ids = Vec::new();
        for (id, p) in pos.iter_mut().enumerate() {
            if *p == 0 {
                *p = ids.len();
                ids.push(id);
            }
        }
        NodeSet { ids, pos }
    }

    pub fn all(n: usize) -> Self {
        NodeSet {
            ids: (0..n).collect(),
            pos: (0..n).collect(),
        }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, id: usize) -> Option<usize> {
        self.pos.get(id).copied().filter(|&p| p != usize::MAX)
    }

    /// This set together with every in-neighbour of its members.
    pub fn expand(&self, adj: &Adjacency) -> NodeSet {
        let n = self.pos.len();
        NodeSet::new(n, self.ids.iter().flat_map(|&v| adj.of(v).iter().copied()))
    }
}

/// Intermediate values of one layer, kept for the backward pass.
///
/// Neighbour entries are flattened: target `t` owns entries
/// `offsets[t]..offsets[t + 1]`, in adjacency order.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub target_rows: Vec<usize>,
    pub offsets: Vec<usize>,
    pub nbr_rows: Vec<usize>,
    /// `h_in · W` for every input row.
    pub z: Array2<f64>,
    /// Attention logits before LeakyReLU, `heads × entries`.
    pub raw: Array2<f64>,
    /// Softmax-normalised coefficients, `heads × entries`.
    pub alpha: Array2<f64>,
    /// Dropout multipliers (0 or `1/(1-p)`), present in training mode.
    pub keep: Option<Array2<f64>>,
    /// Aggregated messages before ELU, `targets × heads·d_head`.
    pub pre: Array2<f64>,
}

impl LayerCache {
    /// Attention distribution of target `t` under head `k`.
    pub fn alpha_row(&self, k: usize, t: usize) -> &[f64] {
        let row = self.alpha.row(k).to_slice().expect("standard layout");
        &row[self.offsets[t]..self.offsets[t + 1]]
    }

    pub fn targets(&self) -> usize {
        self.target_rows.len()
    }
}

/// Runs one layer for `targets`, reading `h_in` whose rows follow `input`.
/// `input` must contain every in-neighbour of every target.
pub fn gat_layer_forward(
    p: &GatLayerParams,
    h_in: &Array2<f64>,
    input: &NodeSet,
    targets: &NodeSet,
    adj: &Adjacency,
    dropout: Option<(f64, &mut dyn RngCore)>,
) -> Result<(Array2<f64>, LayerCache)> {
    if h_in.ncols() != p.d_in() {
        return Err(Error::Shape(format!(
            "layer expects {}-wide input, got {}",
            p.d_in(),
            h_in.ncols()
        )));
    }
    if h_in.nrows() != input.len() {
        return Err(Error::Shape(format!(
            "{} input rows for {} nodes",
            h_in.nrows(),
            input.len()
        )));
    }
    let (heads, dh) = (p.heads, p.d_head);
    let hd = heads * dh;
    let z = h_in.dot(&p.w);
    let zs = z.as_slice().expect("standard layout");

    let rows = input.len();
    let mut sl = vec![0.0; rows * heads];
    let mut sr = vec![0.0; rows * heads];
    for r in 0..rows {
        for k in 0..heads {
            let a = p.attn.row(k);
            let zr = &zs[r * hd + k * dh..r * hd + (k + 1) * dh];
            let (mut l, mut rr) = (0.0, 0.0);
            for d in 0..dh {
                l += a[d] * zr[d];
                rr += a[dh + d] * zr[d];
            }
            sl[r * heads + k] = l;
            sr[r * heads + k] = rr;
        }
    }

    let missing = |id: usize| Error::Consistency(format!("node {id} missing from layer input"));
    let mut target_rows = Vec::with_capacity(targets.len());
    let mut offsets = Vec::with_capacity(targets.len() + 1);
    let mut nbr_rows = Vec::new();
    offsets.push(0);
    for &v in targets.ids() {
        target_rows.push(input.row(v).ok_or_else(|| missing(v))?);
        for &u in adj.of(v) {
            nbr_rows.push(input.row(u).ok_or_else(|| missing(u))?);
        }
        offsets.push(nbr_rows.len());
    }
    let entries = nbr_rows.len();
    let mut raw = Array2::zeros((heads, entries));
    let mut alpha = Array2::zeros((heads, entries));
    let mut keep = dropout.as_ref().filter(|(r, _)| *r > 0.0).map(|_| Array2::ones((heads, entries)));
    let mut pre = Array2::<f64>::zeros((targets.len(), hd));
    let pre_s = pre.as_slice_mut().expect("standard layout");

    let mut dropout = dropout;
    for k in 0..heads {
        let raw_k = raw.row_mut(k).into_slice().expect("standard layout");
        let alpha_k = alpha.row_mut(k).into_slice().expect("standard layout");
        for (t, &rv) in target_rows.iter().enumerate() {
            let span = offsets[t]..offsets[t + 1];
            let mut max = f64::NEG_INFINITY;
            for e in span.clone() {
                let x = sl[rv * heads + k] + sr[nbr_rows[e] * heads + k];
                raw_k[e] = x;
                max = max.max(leaky_relu(x));
            }
            let mut sum = 0.0;
            for e in span.clone() {
                let ex = (leaky_relu(raw_k[e]) - max).exp();
                alpha_k[e] = ex;
                sum += ex;
            }
            for e in span.clone() {
                alpha_k[e] /= sum;
            }
            let out = &mut pre_s[t * hd + k * dh..t * hd + (k + 1) * dh];
            for e in span {
                let mut a = alpha_k[e];
                if let (Some(keep), Some((rate, rng))) = (keep.as_mut(), dropout.as_mut()) {
                    let m = if rng.random::<f64>() < *rate { 0.0 } else { 1.0 / (1.0 - *rate) };
                    keep[[k, e]] = m;
                    a *= m;
                }
                if a != 0.0 {
                    let zu = &zs[nbr_rows[e] * hd + k * dh..nbr_rows[e] * hd + (k + 1) * dh];
                    for d in 0..dh {
                        out[d] += a * zu[d];
                    }
                }
            }
        }
    }

    let d_out = p.d_out();
    let mut h_out = Array2::<f64>::zeros((targets.len(), d_out));
    if p.concat {
        h_out.zip_mut_with(&pre, |o, &x| *o = elu(x));
    } else {
        let scale = 1.0 / heads as f64;
        for (mut o, pr) in h_out.outer_iter_mut().zip(pre.outer_iter()) {
            for k in 0..heads {
                for d in 0..dh {
                    o[d] += scale * elu(pr[k * dh + d]);
                }
            }
        }
    }
    let h_t = h_in.select(Axis(0), &target_rows);
    match &p.proj {
        Some(proj) => h_out += &h_t.dot(proj),
        None => h_out += &h_t,
    }

    let cache = LayerCache {
        target_rows,
        offsets,
        nbr_rows,
        z,
        raw,
        alpha,
        keep,
        pre,
    };
    Ok((h_out, cache))
}

/// Accumulates parameter gradients into `grad` and returns the gradient with
/// respect to `h_in` when `input_grad` is set.
pub fn gat_layer_backward(
    p: &GatLayerParams,
    h_in: &Array2<f64>,
    cache: &LayerCache,
    d_out: &Array2<f64>,
    grad: &mut GatLayerParams,
    input_grad: bool,
) -> Option<Array2<f64>> {
    let (heads, dh) = (p.heads, p.d_head);
    let hd = heads * dh;
    let rows = h_in.nrows();
    let nt = cache.targets();

    let mut dh_in = input_grad.then(|| Array2::<f64>::zeros((rows, p.d_in())));

    // Residual branch.
    match &p.proj {
        Some(proj) => {
            let h_t = h_in.select(Axis(0), &cache.target_rows);
            *grad.proj.as_mut().expect("gradient has projection") += &h_t.t().dot(d_out);
            if let Some(dh_in) = dh_in.as_mut() {
                let back = d_out.dot(&proj.t());
                for (t, &r) in cache.target_rows.iter().enumerate() {
                    let mut row = dh_in.row_mut(r);
                    row += &back.row(t);
                }
            }
        }
        None => {
            if let Some(dh_in) = dh_in.as_mut() {
                for (t, &r) in cache.target_rows.iter().enumerate() {
                    let mut row = dh_in.row_mut(r);
                    row += &d_out.row(t);
                }
            }
        }
    }

    // Through ELU and the head merge.
    let mut dpre = Array2::<f64>::zeros((nt, hd));
    if p.concat {
        ndarray::Zip::from(&mut dpre)
            .and(d_out)
            .and(&cache.pre)
            .for_each(|g, &d, &x| *g = d * elu_grad(x));
    } else {
        let scale = 1.0 / heads as f64;
        for t in 0..nt {
            for k in 0..heads {
                for d in 0..dh {
                    dpre[[t, k * dh + d]] = scale * d_out[[t, d]] * elu_grad(cache.pre[[t, k * dh + d]]);
                }
            }
        }
    }

    let zs = cache.z.as_slice().expect("standard layout");
    let dpre_s = dpre.as_slice().expect("standard layout");
    let mut dz = Array2::<f64>::zeros((rows, hd));
    let dz_s = dz.as_slice_mut().expect("standard layout");
    let mut dsl = vec![0.0; rows * heads];
    let mut dsr = vec![0.0; rows * heads];
    let mut dalpha = Vec::new();

    for k in 0..heads {
        let alpha_k = cache.alpha.row(k);
        let raw_k = cache.raw.row(k);
        for (t, &rv) in cache.target_rows.iter().enumerate() {
            let span = cache.offsets[t]..cache.offsets[t + 1];
            let g = &dpre_s[t * hd + k * dh..t * hd + (k + 1) * dh];
            dalpha.clear();
            for e in span.clone() {
                let ru = cache.nbr_rows[e];
                let zu = &zs[ru * hd + k * dh..ru * hd + (k + 1) * dh];
                let m = cache.keep.as_ref().map_or(1.0, |keep| keep[[k, e]]);
                let a = alpha_k[e] * m;
                let mut da = 0.0;
                for d in 0..dh {
                    da += g[d] * zu[d];
                }
                if a != 0.0 {
                    let dzu = &mut dz_s[ru * hd + k * dh..ru * hd + (k + 1) * dh];
                    for d in 0..dh {
                        dzu[d] += a * g[d];
                    }
                }
                dalpha.push(da * m);
            }
            let dot: f64 = span.clone().zip(&dalpha).map(|(e, da)| alpha_k[e] * da).sum();
            for (e, da) in span.zip(&dalpha) {
                let de = alpha_k[e] * (da - dot);
                let draw = if raw_k[e] > 0.0 { de } else { LEAKY_SLOPE * de };
                dsl[rv * heads + k] += draw;
                dsr[cache.nbr_rows[e] * heads + k] += draw;
            }
        }
    }

    for r in 0..rows {
        for k in 0..heads {
            let (gl, gr) = (dsl[r * heads + k], dsr[r * heads + k]);
            if gl == 0.0 && gr == 0.0 {
                continue;
            }
            let zr = &zs[r * hd + k * dh..r * hd + (k + 1) * dh];
            let dzr = &mut dz_s[r * hd + k * dh..r * hd + (k + 1) * dh];
            for d in 0..dh {
                grad.attn[[k, d]] += gl * zr[d];
                grad.attn[[k, dh + d]] += gr * zr[d];
                dzr[d] += gl * p.attn[[k, d]] + gr * p.attn[[k, dh + d]];
            }
        }
    }

    grad.w += &h_in.t().dot(&dz);
    if let Some(dh_in) = dh_in.as_mut() {
        *dh_in += &dz.dot(&p.w.t());
    }
    dh_in
}

/// Eval-mode layer over every node of a graph; `h_in` has one row per node.
pub fn gat_layer_forward_full(p: &GatLayerParams, h_in: &Array2<f64>, adj: &Adjacency) -> Result<Array2<f64>> {
    if h_in.nrows() != adj.len() {
        return Err(Error::Shape(format!("{} rows for a {}-node graph", h_in.nrows(), adj.len())));
    }
    let all = NodeSet::all(adj.len());
    gat_layer_forward(p, h_in, &all, &all, adj, None).map(|(h, _)| h)
}

/// Attention distribution of node `v` over its in-neighbours (self included)
/// for head `head`, in adjacency order.
pub fn attention_coefficients(
    p: &GatLayerParams,
    head: usize,
    h: &Array2<f64>,
    adj: &Adjacency,
    v: usize,
) -> Result<Vec<f64>> {
    if head >= p.heads {
        return Err(Error::Shape(format!("head {head} of {}", p.heads)));
    }
    if h.ncols() != p.d_in() {
        return Err(Error::Shape(format!("layer expects {}-wide input, got {}", p.d_in(), h.ncols())));
    }
    let dh = p.d_head;
    let w = p.w.slice(ndarray::s![.., head * dh..(head + 1) * dh]);
    let a = p.attn.row(head);
    let score = |u: usize, off: usize| -> f64 {
        let z = h.row(u).dot(&w);
        (0..dh).map(|d| a[off + d] * z[d]).sum()
    };
    let sv = score(v, 0);
    let logits: Vec<f64> = adj.of(v).iter().map(|&u| leaky_relu(sv + score(u, dh))).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = ex.iter().sum();
    Ok(ex.into_iter().map(|e| e / sum).collect())
}
