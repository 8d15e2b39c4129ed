//! The attention network: an input projection, `L` blocks of edge-aware
//! local attention followed by global multi-head self-attention with a
//! residual connection and layer norm, then mean pooling and a linear head.
//! In training mode dropout is applied to the attention probabilities of
//! both sub-blocks.
//!
//! Backward passes are written by hand; `diffcore::finite_difference_check`
//! is the reference they are tested against.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::connectome::ConnectivityMatrix;
use crate::diffcore::{
    dot, dropout, layer_norm_backward, layer_norm_forward, softmax_in_place, xavier_uniform, LayerNormCache,
    ParamStore, Tensor2, LAYER_NORM_EPS,
};
use crate::error::{Error, Result};
use crate::hybrid_graph::{EdgeKind, HybridEdge, HybridGraph, NODE_FEATURE_DIM};
use crate::objectives::{joint_loss, sf_consistency_grad, sf_consistency_loss, LossWeights};

/// One-hot edge kind followed by the edge weight.
pub const EDGE_ATTR_DIM: usize = EdgeKind::ALL.len() + 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MagnetConfig {
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub dropout: f64,
    /// Keys and values from edge attributes only, without the neighbour embedding.
    pub edge_only_kv: bool,
    /// When false the edge-kind one-hot is zeroed and only the weight remains.
    pub use_edge_kind: bool,
}

impl Default for MagnetConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            heads: 4,
            layers: 2,
            dropout: 0.2,
            edge_only_kv: false,
            use_edge_kind: true,
        }
    }
}

impl MagnetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden width {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("at least one layer is required".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} must lie in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Everything recorded by one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub x_final: Tensor2,
    /// `[layer][node][slot]`, slots ordered as in [`HybridGraph::incidence`].
    pub local_attention: Vec<Vec<Vec<f64>>>,
    /// `[layer][head]`, each an η×η row-stochastic matrix.
    pub global_attention: Vec<Vec<Tensor2>>,
    pub prediction: f64,
}

struct LocalNames {
    wq: String,
    bq: String,
    wk_node: String,
    wk_edge: String,
    bk: String,
    wv_node: String,
    wv_edge: String,
    bv: String,
}

impl LocalNames {
    fn new(layer: usize) -> Self {
        let p = |s: &str| format!("layer{layer}.local.{s}");
        Self {
            wq: p("wq"),
            bq: p("bq"),
            wk_node: p("wk_node"),
            wk_edge: p("wk_edge"),
            bk: p("bk"),
            wv_node: p("wv_node"),
            wv_edge: p("wv_edge"),
            bv: p("bv"),
        }
    }
}

struct GlobalNames {
    wq: String,
    bq: String,
    wk: String,
    bk: String,
    wv: String,
    bv: String,
    wo: String,
    bo: String,
    ln_gain: String,
    ln_bias: String,
}

impl GlobalNames {
    fn new(layer: usize) -> Self {
        let p = |s: &str| format!("layer{layer}.global.{s}");
        Self {
            wq: p("wq"),
            bq: p("bq"),
            wk: p("wk"),
            bk: p("bk"),
            wv: p("wv"),
            bv: p("bv"),
            wo: p("wo"),
            bo: p("bo"),
            ln_gain: p("ln_gain"),
            ln_bias: p("ln_bias"),
        }
    }
}

const INPUT_W: &str = "input.w";
const INPUT_B: &str = "input.b";
const HEAD_W: &str = "head.w";
const HEAD_B: &str = "head.b";

/// Glorot-uniform weights, zero biases, unit layer-norm gains.
pub fn init_params<R: Rng + ?Sized>(config: &MagnetConfig, rng: &mut R) -> Result<ParamStore> {
    config.validate()?;
    let h = config.hidden;
    let mut p = ParamStore::new();
    p.insert(INPUT_W, xavier_uniform(NODE_FEATURE_DIM, h, rng));
    p.insert(INPUT_B, Tensor2::zeros(1, h));
    for l in 0..config.layers {
        let n = LocalNames::new(l);
        p.insert(n.wq.as_str(), xavier_uniform(h, h, rng));
        p.insert(n.bq.as_str(), Tensor2::zeros(1, h));
        if !config.edge_only_kv {
            p.insert(n.wk_node.as_str(), xavier_uniform(h, h, rng));
            p.insert(n.wv_node.as_str(), xavier_uniform(h, h, rng));
        }
        p.insert(n.wk_edge.as_str(), xavier_uniform(EDGE_ATTR_DIM, h, rng));
        p.insert(n.bk.as_str(), Tensor2::zeros(1, h));
        p.insert(n.wv_edge.as_str(), xavier_uniform(EDGE_ATTR_DIM, h, rng));
        p.insert(n.bv.as_str(), Tensor2::zeros(1, h));

        let g = GlobalNames::new(l);
        for (w, b) in [(&g.wq, &g.bq), (&g.wk, &g.bk), (&g.wv, &g.bv), (&g.wo, &g.bo)] {
            p.insert(w.as_str(), xavier_uniform(h, h, rng));
            p.insert(b.as_str(), Tensor2::zeros(1, h));
        }
        p.insert(g.ln_gain.as_str(), Tensor2::from_vec(1, h, vec![1.0; h])?);
        p.insert(g.ln_bias.as_str(), Tensor2::zeros(1, h));
    }
    p.insert(HEAD_W, xavier_uniform(h, 1, rng));
    p.insert(HEAD_B, Tensor2::zeros(1, 1));
    Ok(p)
}

pub fn edge_attribute(edge: &HybridEdge, use_kind: bool) -> [f64; EDGE_ATTR_DIM] {
    let mut e = [0.0; EDGE_ATTR_DIM];
    if use_kind {
        e[edge.kind.index()] = 1.0;
    }
    e[EDGE_ATTR_DIM - 1] = edge.weight;
    e
}

fn edge_attributes(graph: &HybridGraph, use_kind: bool) -> Tensor2 {
    let mut t = Tensor2::zeros(graph.edges.len(), EDGE_ATTR_DIM);
    for (idx, e) in graph.edges.iter().enumerate() {
        t.row_mut(idx).copy_from_slice(&edge_attribute(e, use_kind));
    }
    t
}

fn linear(x: &Tensor2, w: &Tensor2, b: &Tensor2) -> Tensor2 {
    let mut y = x.matmul(w);
    y.add_row_bias(b);
    y
}

// ---------------------------------------------------------------------------
// Local edge-aware attention

struct LocalCache {
    x: Tensor2,
    edge_attr: Tensor2,
    q: Tensor2,
    /// Per node, per slot: key and value vectors.
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
    alpha: Vec<Vec<f64>>,
    alpha_mask: Vec<Vec<f64>>,
}

/// Inverted-dropout mask over `len` attention probabilities (all ones in eval).
fn attention_mask<R: Rng + ?Sized>(len: usize, config: &MagnetConfig, mode: Mode, rng: &mut R) -> Result<Vec<f64>> {
    let ones = Tensor2::from_vec(1, len, vec![1.0; len])?;
    Ok(dropout(&ones, config.dropout, rng, mode == Mode::Train)?.1)
}

fn local_forward<R: Rng + ?Sized>(
    graph: &HybridGraph,
    incidence: &[Vec<(usize, usize)>],
    x: &Tensor2,
    params: &ParamStore,
    layer: usize,
    config: &MagnetConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor2, LocalCache)> {
    let names = LocalNames::new(layer);
    let h = config.hidden;
    let scale = 1.0 / (h as f64).sqrt();
    let edge_attr = edge_attributes(graph, config.use_edge_kind);

    let q = linear(x, params.get(&names.wq), params.get(&names.bq));
    let mut ek = edge_attr.matmul(params.get(&names.wk_edge));
    ek.add_row_bias(params.get(&names.bk));
    let mut ev = edge_attr.matmul(params.get(&names.wv_edge));
    ev.add_row_bias(params.get(&names.bv));
    let (pk, pv) = if config.edge_only_kv {
        (None, None)
    } else {
        (
            Some(x.matmul(params.get(&names.wk_node))),
            Some(x.matmul(params.get(&names.wv_node))),
        )
    };

    let n = graph.node_count;
    let mut z = Tensor2::zeros(n, h);
    let mut keys = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    let mut alphas = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for i in 0..n {
        let slots = &incidence[i];
        let mut node_keys = Vec::with_capacity(slots.len());
        let mut node_values = Vec::with_capacity(slots.len());
        let mut logits = Vec::with_capacity(slots.len());
        for &(e, j) in slots {
            let mut k = ek.row(e).to_vec();
            let mut v = ev.row(e).to_vec();
            if let (Some(pk), Some(pv)) = (&pk, &pv) {
                for c in 0..h {
                    k[c] += pk.get(j, c);
                    v[c] += pv.get(j, c);
                }
            }
            logits.push(dot(q.row(i), &k) * scale);
            node_keys.push(k);
            node_values.push(v);
        }
        if !slots.is_empty() {
            if logits.iter().any(|l| !l.is_finite()) {
                return Err(Error::Numeric(format!(
                    "local attention layer {layer}, node {i}: non-finite logit"
                )));
            }
            softmax_in_place(&mut logits);
            let mask = attention_mask(logits.len(), config, mode, rng)?;
            let zi = z.row_mut(i);
            for ((a, m), v) in logits.iter().zip(&mask).zip(&node_values) {
                for c in 0..h {
                    zi[c] += a * m * v[c];
                }
            }
            if zi.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "local attention layer {layer}, node {i}: non-finite embedding"
                )));
            }
            masks.push(mask);
        } else {
            masks.push(Vec::new());
        }
        keys.push(node_keys);
        values.push(node_values);
        alphas.push(logits);
    }
    Ok((
        z,
        LocalCache {
            x: x.clone(),
            edge_attr,
            q,
            keys,
            values,
            alpha: alphas,
            alpha_mask: masks,
        },
    ))
}

fn local_backward(
    incidence: &[Vec<(usize, usize)>],
    cache: &LocalCache,
    dz: &Tensor2,
    params: &ParamStore,
    layer: usize,
    config: &MagnetConfig,
    grads: &mut Vec<(String, Tensor2)>,
) -> Tensor2 {
    let names = LocalNames::new(layer);
    let h = config.hidden;
    let n = cache.x.rows;
    let scale = 1.0 / (h as f64).sqrt();
    let n_edges = cache.edge_attr.rows;

    let mut dq = Tensor2::zeros(n, h);
    let mut dpk = Tensor2::zeros(n, h);
    let mut dpv = Tensor2::zeros(n, h);
    let mut dek = Tensor2::zeros(n_edges, h);
    let mut dev = Tensor2::zeros(n_edges, h);
    for i in 0..n {
        let slots = &incidence[i];
        if slots.is_empty() {
            continue;
        }
        let dzi = dz.row(i);
        let alpha = &cache.alpha[i];
        let mask = &cache.alpha_mask[i];
        let dalpha: Vec<f64> = cache.values[i].iter().zip(mask).map(|(v, m)| m * dot(dzi, v)).collect();
        let mix: f64 = alpha.iter().zip(&dalpha).map(|(a, d)| a * d).sum();
        let qi = cache.q.row(i).to_vec();
        for (s, &(e, j)) in slots.iter().enumerate() {
            let dlogit = alpha[s] * (dalpha[s] - mix) * scale;
            let k = &cache.keys[i][s];
            let dqi = dq.row_mut(i);
            for c in 0..h {
                dqi[c] += dlogit * k[c];
            }
            for c in 0..h {
                let dk = dlogit * qi[c];
                let dv = alpha[s] * mask[s] * dzi[c];
                dek.values[e * h + c] += dk;
                dev.values[e * h + c] += dv;
                dpk.values[j * h + c] += dk;
                dpv.values[j * h + c] += dv;
            }
        }
    }

    let x = &cache.x;
    grads.push((names.wq.clone(), x.matmul_tn(&dq)));
    grads.push((names.bq.clone(), dq.column_sums()));
    grads.push((names.wk_edge.clone(), cache.edge_attr.matmul_tn(&dek)));
    grads.push((names.bk.clone(), dek.column_sums()));
    grads.push((names.wv_edge.clone(), cache.edge_attr.matmul_tn(&dev)));
    grads.push((names.bv.clone(), dev.column_sums()));

    let mut dx = dq.matmul_nt(params.get(&names.wq));
    if !config.edge_only_kv {
        grads.push((names.wk_node.clone(), x.matmul_tn(&dpk)));
        grads.push((names.wv_node.clone(), x.matmul_tn(&dpv)));
        dx.add_assign(&dpk.matmul_nt(params.get(&names.wk_node)));
        dx.add_assign(&dpv.matmul_nt(params.get(&names.wv_node)));
    }
    dx
}

/// Edge-aware local attention for one layer. Returns the new embeddings and,
/// per node, the attention weights over its incident edges.
pub fn local_edge_attention(
    graph: &HybridGraph,
    x: &Tensor2,
    params: &ParamStore,
    layer: usize,
    config: &MagnetConfig,
) -> Result<(Tensor2, Vec<Vec<f64>>)> {
    let inc = graph.incidence();
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let (z, cache) = local_forward(graph, &inc, x, params, layer, config, Mode::Eval, &mut rng)?;
    Ok((z, cache.alpha))
}

// ---------------------------------------------------------------------------
// Global multi-head self-attention with residual and layer norm

struct GlobalCache {
    z: Tensor2,
    q: Tensor2,
    k: Tensor2,
    v: Tensor2,
    attn: Vec<Tensor2>,
    attn_mask: Vec<Vec<f64>>,
    concat: Tensor2,
    ln: Vec<LayerNormCache>,
}

fn global_forward<R: Rng + ?Sized>(
    z: &Tensor2,
    params: &ParamStore,
    layer: usize,
    config: &MagnetConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor2, GlobalCache)> {
    let g = GlobalNames::new(layer);
    let (n, h) = z.shape();
    let heads = config.heads;
    let d = h / heads;
    let scale = 1.0 / (d as f64).sqrt();

    let q = linear(z, params.get(&g.wq), params.get(&g.bq));
    let k = linear(z, params.get(&g.wk), params.get(&g.bk));
    let v = linear(z, params.get(&g.wv), params.get(&g.bv));

    let mut concat = Tensor2::zeros(n, h);
    let mut attn = Vec::with_capacity(heads);
    let mut attn_mask = Vec::with_capacity(heads);
    for hd in 0..heads {
        let cols = hd * d..(hd + 1) * d;
        let mut a = Tensor2::zeros(n, n);
        for r in 0..n {
            let row = a.row_mut(r);
            for c in 0..n {
                row[c] = dot(&q.row(r)[cols.clone()], &k.row(c)[cols.clone()]) * scale;
            }
            softmax_in_place(row);
        }
        let mask = attention_mask(n * n, config, mode, rng)?;
        for r in 0..n {
            for c in 0..n {
                let w = a.get(r, c) * mask[r * n + c];
                let vrow = &v.row(c)[cols.clone()];
                let orow = &mut concat.row_mut(r)[cols.clone()];
                for (o, &vv) in orow.iter_mut().zip(vrow) {
                    *o += w * vv;
                }
            }
        }
        attn.push(a);
        attn_mask.push(mask);
    }
    let mha = linear(&concat, params.get(&g.wo), params.get(&g.bo));

    let gain = &params.get(&g.ln_gain).values;
    let bias = &params.get(&g.ln_bias).values;
    let mut out = Tensor2::zeros(n, h);
    let mut ln = Vec::with_capacity(n);
    for r in 0..n {
        let y: Vec<f64> = z.row(r).iter().zip(mha.row(r)).map(|(a, b)| a + b).collect();
        let (o, c) = layer_norm_forward(&y, gain, bias, LAYER_NORM_EPS);
        out.row_mut(r).copy_from_slice(&o);
        ln.push(c);
    }
    out.ensure_finite(&format!("global attention layer {layer}"))?;
    Ok((
        out,
        GlobalCache {
            z: z.clone(),
            q,
            k,
            v,
            attn,
            attn_mask,
            concat,
            ln,
        },
    ))
}

fn global_backward(
    cache: &GlobalCache,
    dout: &Tensor2,
    params: &ParamStore,
    layer: usize,
    config: &MagnetConfig,
    grads: &mut Vec<(String, Tensor2)>,
) -> Tensor2 {
    let g = GlobalNames::new(layer);
    let (n, h) = dout.shape();
    let heads = config.heads;
    let d = h / heads;
    let scale = 1.0 / (d as f64).sqrt();

    let gain = &params.get(&g.ln_gain).values;
    let mut dgain = vec![0.0; h];
    let mut dbias = vec![0.0; h];
    let mut dy = Tensor2::zeros(n, h);
    for r in 0..n {
        let d = layer_norm_backward(&cache.ln[r], gain, dout.row(r), &mut dgain, &mut dbias);
        dy.row_mut(r).copy_from_slice(&d);
    }
    grads.push((g.ln_gain.clone(), Tensor2::from_vec(1, h, dgain).expect("shape")));
    grads.push((g.ln_bias.clone(), Tensor2::from_vec(1, h, dbias).expect("shape")));

    // residual branch
    let mut dz = dy.clone();
    let dmha = dy;
    grads.push((g.wo.clone(), cache.concat.matmul_tn(&dmha)));
    grads.push((g.bo.clone(), dmha.column_sums()));
    let dconcat = dmha.matmul_nt(params.get(&g.wo));

    let mut dq = Tensor2::zeros(n, h);
    let mut dk = Tensor2::zeros(n, h);
    let mut dv = Tensor2::zeros(n, h);
    for hd in 0..heads {
        let cols = hd * d..(hd + 1) * d;
        let a = &cache.attn[hd];
        let mask = &cache.attn_mask[hd];
        // dA = dO_h · V_hᵀ, dV_h = Aᵀ · dO_h
        let mut ds = Tensor2::zeros(n, n);
        for r in 0..n {
            let dor = &dconcat.row(r)[cols.clone()];
            for c in 0..n {
                ds.set(r, c, mask[r * n + c] * dot(dor, &cache.v.row(c)[cols.clone()]));
            }
        }
        for r in 0..n {
            for c in 0..n {
                let w = a.get(r, c) * mask[r * n + c];
                let dor = &dconcat.row(r)[cols.clone()];
                let dvr = &mut dv.row_mut(c)[cols.clone()];
                for (o, &x) in dvr.iter_mut().zip(dor) {
                    *o += w * x;
                }
            }
        }
        // softmax backward, row-wise
        for r in 0..n {
            let arow = a.row(r);
            let dsrow = ds.row_mut(r);
            let mix: f64 = arow.iter().zip(dsrow.iter()).map(|(p, g)| p * g).sum();
            for c in 0..n {
                dsrow[c] = arow[c] * (dsrow[c] - mix) * scale;
            }
        }
        for r in 0..n {
            for c in 0..n {
                let s = ds.get(r, c);
                if s == 0.0 {
                    continue;
                }
                let kc = cache.k.row(c)[cols.clone()].to_vec();
                let qr = cache.q.row(r)[cols.clone()].to_vec();
                let dqr = &mut dq.row_mut(r)[cols.clone()];
                for (o, x) in dqr.iter_mut().zip(&kc) {
                    *o += s * x;
                }
                let dkc = &mut dk.row_mut(c)[cols.clone()];
                for (o, x) in dkc.iter_mut().zip(&qr) {
                    *o += s * x;
                }
            }
        }
    }
    for (dproj, w, b) in [(&dq, &g.wq, &g.bq), (&dk, &g.wk, &g.bk), (&dv, &g.wv, &g.bv)] {
        grads.push((w.clone(), cache.z.matmul_tn(dproj)));
        grads.push((b.clone(), dproj.column_sums()));
        dz.add_assign(&dproj.matmul_nt(params.get(w)));
    }
    dz
}

/// `LN(X + MultiHeadAttention(X, X, X))` for one layer, without dropout.
/// Returns the output and the per-head attention matrices.
pub fn global_self_attention(
    x: &Tensor2,
    params: &ParamStore,
    layer: usize,
    config: &MagnetConfig,
) -> Result<(Tensor2, Vec<Tensor2>)> {
    config.validate()?;
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let (out, cache) = global_forward(x, params, layer, config, Mode::Eval, &mut rng)?;
    Ok((out, cache.attn))
}

// ---------------------------------------------------------------------------
// Full network

struct LayerCache {
    local: LocalCache,
    global: GlobalCache,
}

struct ForwardCache {
    features: Tensor2,
    incidence: Vec<Vec<(usize, usize)>>,
    layers: Vec<LayerCache>,
    pooled: Vec<f64>,
}

fn forward_cached<R: Rng + ?Sized>(
    graph: &HybridGraph,
    params: &ParamStore,
    config: &MagnetConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<(ForwardTrace, ForwardCache)> {
    config.validate()?;
    if graph.node_count == 0 {
        return Err(Error::Validation("graph has no nodes".into()));
    }
    let features = Tensor2::from_vec(
        graph.node_count,
        NODE_FEATURE_DIM,
        graph.node_features.iter().flatten().copied().collect(),
    )?;
    let incidence = graph.incidence();
    let mut x = linear(&features, params.get(INPUT_W), params.get(INPUT_B));
    x.ensure_finite("input projection")?;

    let mut layers = Vec::with_capacity(config.layers);
    let mut local_attention = Vec::with_capacity(config.layers);
    let mut global_attention = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let (z, local) = local_forward(graph, &incidence, &x, params, l, config, mode, rng)?;
        let (out, global) = global_forward(&z, params, l, config, mode, rng)?;
        local_attention.push(local.alpha.clone());
        global_attention.push(global.attn.clone());
        layers.push(LayerCache {
            local,
            global,
        });
        x = out;
    }

    let n = graph.node_count as f64;
    let pooled: Vec<f64> = x.column_sums().values.iter().map(|v| v / n).collect();
    let prediction = dot(&pooled, &params.get(HEAD_W).values) + params.get(HEAD_B).values[0];
    if !prediction.is_finite() {
        return Err(Error::Numeric("prediction is not finite".into()));
    }
    Ok((
        ForwardTrace {
            x_final: x,
            local_attention,
            global_attention,
            prediction,
        },
        ForwardCache {
            features,
            incidence,
            layers,
            pooled,
        },
    ))
}

/// Runs the network on one graph.
pub fn forward<R: Rng + ?Sized>(
    graph: &HybridGraph,
    params: &ParamStore,
    config: &MagnetConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<ForwardTrace> {
    forward_cached(graph, params, config, mode, rng).map(|(t, _)| t)
}

/// Gradients for an upstream `d loss / d prediction` and `d loss / d X_final`.
fn backward(
    cache: &ForwardCache,
    params: &ParamStore,
    config: &MagnetConfig,
    dprediction: f64,
    dx_final: Option<&Tensor2>,
) -> Vec<(String, Tensor2)> {
    let mut grads = Vec::new();
    let h = config.hidden;
    let n = cache.features.rows;

    let head_w = &params.get(HEAD_W).values;
    grads.push((
        HEAD_W.to_string(),
        Tensor2::from_vec(h, 1, cache.pooled.iter().map(|p| p * dprediction).collect()).expect("shape"),
    ));
    grads.push((HEAD_B.to_string(), Tensor2::from_vec(1, 1, vec![dprediction]).expect("shape")));

    let mut dx = match dx_final {
        Some(d) => d.clone(),
        None => Tensor2::zeros(n, h),
    };
    for r in 0..n {
        for (o, w) in dx.row_mut(r).iter_mut().zip(head_w) {
            *o += dprediction * w / n as f64;
        }
    }

    for l in (0..config.layers).rev() {
        let lc = &cache.layers[l];
        let dz = global_backward(&lc.global, &dx, params, l, config, &mut grads);
        dx = local_backward(&cache.incidence, &lc.local, &dz, params, l, config, &mut grads);
    }
    grads.push((INPUT_W.to_string(), cache.features.matmul_tn(&dx)));
    grads.push((INPUT_B.to_string(), dx.column_sums()));
    grads
}

/// Loss values for one graph (already scaled by the batch weight).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub joint: f64,
    pub task: f64,
    pub sf: f64,
}

/// Forward + backward for one graph under the joint objective, with every
/// loss term divided by `batch_size`. Gradients are accumulated into `params`.
#[allow(clippy::too_many_arguments)]
pub fn accumulate_joint_gradient<R: Rng + ?Sized>(
    graph: &HybridGraph,
    fnc: &ConnectivityMatrix,
    target: f64,
    params: &mut ParamStore,
    config: &MagnetConfig,
    weights: LossWeights,
    batch_size: usize,
    mode: Mode,
    rng: &mut R,
) -> Result<LossParts> {
    let (trace, cache) = forward_cached(graph, params, config, mode, rng)?;
    let b = batch_size as f64;
    let residual = trace.prediction - target;
    let task = residual * residual / b;
    let dpred = weights.task * 2.0 * residual / b;
    let (sf, dx) = if weights.sf != 0.0 {
        let sf = sf_consistency_loss(&trace.x_final, fnc)? / b;
        let mut g = sf_consistency_grad(&trace.x_final, fnc)?;
        for v in &mut g.values {
            *v *= weights.sf / b;
        }
        (sf, Some(g))
    } else {
        (sf_consistency_loss(&trace.x_final, fnc)? / b, None)
    };
    let grads = backward(&cache, params, config, dpred, dx.as_ref());
    for (name, g) in &grads {
        params.accumulate_grad(name, g);
    }
    Ok(LossParts {
        joint: joint_loss(task, sf, weights),
        task,
        sf,
    })
}

/// Joint loss of a single graph without gradients (for finite-difference checks).
pub fn joint_loss_value(
    graph: &HybridGraph,
    fnc: &ConnectivityMatrix,
    target: f64,
    params: &ParamStore,
    config: &MagnetConfig,
    weights: LossWeights,
) -> Result<f64> {
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let trace = forward(graph, params, config, Mode::Eval, &mut rng)?;
    let r = trace.prediction - target;
    let sf = sf_consistency_loss(&trace.x_final, fnc)?;
    Ok(joint_loss(r * r, sf, weights))
}

// ---------------------------------------------------------------------------
// Attention-based importance

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectionImportance {
    pub i: usize,
    pub j: usize,
    pub kind: EdgeKind,
    pub mean_weight: f64,
}

/// Mean local attention weight per `(pair, kind)`, averaged over both
/// directions, all layers and all subjects in which the edge exists.
/// Sorted by descending weight, ties by `(i, j, kind)`.
pub fn extract_attention_importance(
    traces: &[ForwardTrace],
    graphs: &[&HybridGraph],
) -> Result<Vec<ConnectionImportance>> {
    if traces.is_empty() {
        return Err(Error::Validation("no traces to aggregate".into()));
    }
    if traces.len() != graphs.len() {
        return Err(Error::Validation(format!(
            "{} traces for {} graphs",
            traces.len(),
            graphs.len()
        )));
    }
    let mut acc: BTreeMap<(usize, usize, EdgeKind), (f64, usize)> = BTreeMap::new();
    for (trace, graph) in traces.iter().zip(graphs) {
        let inc = graph.incidence();
        for layer in &trace.local_attention {
            if layer.len() != graph.node_count {
                return Err(Error::Validation("trace does not match graph".into()));
            }
            for (node, slots) in inc.iter().enumerate() {
                if layer[node].len() != slots.len() {
                    return Err(Error::Validation("trace does not match graph".into()));
                }
                for (s, &(e, _)) in slots.iter().enumerate() {
                    let edge = &graph.edges[e];
                    let entry = acc.entry((edge.i, edge.j, edge.kind)).or_insert((0.0, 0));
                    entry.0 += layer[node][s];
                    entry.1 += 1;
                }
            }
        }
    }
    let mut ranked: Vec<ConnectionImportance> = acc
        .into_iter()
        .map(|((i, j, kind), (sum, count))| ConnectionImportance {
            i,
            j,
            kind,
            mean_weight: sum / count as f64,
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.mean_weight
            .total_cmp(&a.mean_weight)
            .then((a.i, a.j, a.kind).cmp(&(b.i, b.j, b.kind)))
    });
    Ok(ranked)
}

/// Number of connections reported for a fraction: `⌈fraction · total⌉`.
pub fn top_count(fraction: f64, total: usize) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction {fraction} must lie in (0, 1]")));
    }
    // absorb representation error such as 0.03 · 200 = 6.000000000000001
    let raw = fraction * total as f64;
    let count = (raw - 1e-9 * raw.max(1.0)).ceil() as usize;
    Ok(count.min(total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(h: usize, heads: usize) -> MagnetConfig {
        MagnetConfig {
            hidden: h,
            heads,
            layers: 1,
            dropout: 0.0,
            ..Default::default()
        }
    }

    fn graph(n: usize, edges: &[(usize, usize, EdgeKind, f64)]) -> HybridGraph {
        HybridGraph {
            node_count: n,
            node_features: (0..n).map(|i| [0.1 * i as f64, -0.2 * i as f64 + 0.05]).collect(),
            edges: edges
                .iter()
                .map(|&(i, j, kind, weight)| HybridEdge { i, j, kind, weight })
                .collect(),
        }
    }

    #[test]
    fn single_slot_takes_full_weight() {
        let cfg = tiny_config(4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = init_params(&cfg, &mut rng).unwrap();
        let g = graph(2, &[(0, 1, EdgeKind::Functional, 0.7)]);
        let x = Tensor2::from_vec(2, 4, vec![0.3, -0.1, 0.5, 0.2, -0.4, 0.9, 0.0, 0.1]).unwrap();
        let (z, alpha) = local_edge_attention(&g, &x, &p, 0, &cfg).unwrap();
        assert_eq!(alpha[0], vec![1.0]);
        // z_0 = V for the only slot = x_1 Wv_node + e Wv_edge + bv
        let e = Tensor2::from_vec(1, EDGE_ATTR_DIM, edge_attribute(&g.edges[0], true).to_vec()).unwrap();
        let mut v = Tensor2::from_vec(1, 4, x.row(1).to_vec())
            .unwrap()
            .matmul(p.get("layer0.local.wv_node"));
        v.add_assign(&e.matmul(p.get("layer0.local.wv_edge")));
        for c in 0..4 {
            assert!((z.get(0, c) - v.values[c]).abs() < 1e-14);
        }
    }

    #[test]
    fn isolated_node_gets_zero_embedding() {
        let cfg = tiny_config(4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = init_params(&cfg, &mut rng).unwrap();
        let g = graph(3, &[(0, 1, EdgeKind::Structural, 0.2)]);
        let x = Tensor2::from_vec(3, 4, vec![0.5; 12]).unwrap();
        let (z, alpha) = local_edge_attention(&g, &x, &p, 0, &cfg).unwrap();
        assert!(alpha[2].is_empty());
        assert!(z.row(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn equal_keys_give_uniform_weights() {
        let cfg = tiny_config(4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = init_params(&cfg, &mut rng).unwrap();
        // keys independent of neighbour and edge: only the bias remains
        p.insert("layer0.local.wk_node", Tensor2::zeros(4, 4));
        p.insert("layer0.local.wk_edge", Tensor2::zeros(EDGE_ATTR_DIM, 4));
        p.insert("layer0.local.bk", Tensor2::from_vec(1, 4, vec![0.3, 1.0, -2.0, 0.5]).unwrap());
        let g = graph(
            4,
            &[
                (0, 1, EdgeKind::Functional, 0.4),
                (0, 2, EdgeKind::CrossModal, -0.3),
                (0, 3, EdgeKind::DetourLong, 1.1),
            ],
        );
        let x = Tensor2::from_vec(4, 4, (0..16).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap();
        let (_, alpha) = local_edge_attention(&g, &x, &p, 0, &cfg).unwrap();
        for a in &alpha[0] {
            assert!((a - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_value_projection_reduces_to_layer_norm() {
        let cfg = tiny_config(4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = init_params(&cfg, &mut rng).unwrap();
        p.insert("layer0.global.wv", Tensor2::zeros(4, 4));
        p.insert("layer0.global.wo", Tensor2::zeros(4, 4));
        let x = Tensor2::from_vec(3, 4, (0..12).map(|v| (v as f64 * 0.9).cos()).collect()).unwrap();
        let (out, _) = global_self_attention(&x, &p, 0, &cfg).unwrap();
        for r in 0..3 {
            let expect = crate::diffcore::layer_norm(x.row(r), &[1.0; 4], &[0.0; 4], LAYER_NORM_EPS).unwrap();
            for c in 0..4 {
                assert!((out.get(r, c) - expect[c]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = MagnetConfig {
            hidden: 8,
            heads: 2,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = init_params(&cfg, &mut rng).unwrap();
        let g = graph(
            3,
            &[(0, 1, EdgeKind::Functional, 0.4), (1, 2, EdgeKind::Structural, -0.6)],
        );
        let a = forward(&g, &p, &cfg, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        let b = forward(&g, &p, &cfg, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn importance_averages_slots() {
        let g = graph(2, &[(0, 1, EdgeKind::Functional, 0.5)]);
        let t = |w: f64| ForwardTrace {
            x_final: Tensor2::zeros(2, 1),
            local_attention: vec![vec![vec![w], vec![w]]],
            global_attention: vec![],
            prediction: 0.0,
        };
        let r = extract_attention_importance(&[t(1.0)], &[&g]).unwrap();
        assert_eq!(r[0].mean_weight, 1.0);
        let r = extract_attention_importance(&[t(0.2), t(0.4)], &[&g, &g]).unwrap();
        assert!((r[0].mean_weight - 0.3).abs() < 1e-15);
        assert!(extract_attention_importance(&[], &[]).is_err());
    }

    #[test]
    fn top_count_uses_ceiling() {
        assert_eq!(top_count(0.03, 200).unwrap(), 6);
        assert_eq!(top_count(0.03, 10).unwrap(), 1);
        assert_eq!(top_count(1.0, 17).unwrap(), 17);
        assert!(top_count(0.0, 10).is_err());
        assert!(top_count(1.5, 10).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(MagnetConfig { hidden: 10, heads: 4, ..Default::default() }.validate().is_err());
        assert!(MagnetConfig { layers: 0, ..Default::default() }.validate().is_err());
        assert!(MagnetConfig::default().validate().is_ok());
    }
}
