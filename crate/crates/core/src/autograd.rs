//! Tape-based reverse-mode differentiation over dense f64 tensors.
//!
//! Activations use the layout `[batch, seq, features]` (or `[batch, features]`
//! for per-sequence conditioning vectors); every op works on the trailing axis
//! unless its name says otherwise. The tape keeps all forward values so that
//! [`Tape::backward`] can run any number of times with different cotangents.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::error::{input, Result};
use crate::params::{Gradients, ParamStore, Tensor};

pub type NodeId = usize;

const LN_EPS: f64 = 1e-6;
const ROPE_BASE: f64 = 10_000.0;
const GELU_K: f64 = 0.797_884_560_802_865_4; // √(2/π)

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    Add(NodeId, NodeId),
    Silu(NodeId),
    Gelu(NodeId),
    LayerNorm { x: NodeId, rstd: Vec<f64> },
    Modulate { x: NodeId, shift: NodeId, scale: NodeId },
    GatedAdd { h: NodeId, gate: NodeId, y: NodeId },
    Embed { table: NodeId, ids: Vec<u32> },
    ConcatLast(Vec<NodeId>),
    ConcatSeq(NodeId, NodeId),
    SliceSeq { x: NodeId, start: usize },
    SliceLast { x: NodeId, start: usize },
    Rope { x: NodeId, heads: usize, positions: Vec<usize> },
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, probs: Vec<f64> },
    ScaleSeq { x: NodeId, factors: Vec<f64> },
    Softmax(NodeId),
    MixExperts { gate: NodeId, experts: Vec<NodeId> },
}

struct Node {
    shape: Vec<usize>,
    /// Empty for parameters, whose values live in the store.
    data: Vec<f64>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

fn last(shape: &[usize]) -> usize {
    *shape.last().expect("tensor has rank >= 1")
}

fn rows(shape: &[usize]) -> usize {
    shape[..shape.len() - 1].iter().product()
}

/// `c = a·b (+ c if accumulate)` with optional transposes; `a` is `m×k` after transposition.
#[allow(clippy::too_many_arguments)]
fn gemm(
    a: &[f64],
    a_shape: (usize, usize),
    trans_a: bool,
    b: &[f64],
    b_shape: (usize, usize),
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let av = ArrayView2::from_shape(a_shape, a).expect("gemm lhs shape");
    let bv = ArrayView2::from_shape(b_shape, b).expect("gemm rhs shape");
    let av = if trans_a { av.t() } else { av };
    let bv = if trans_b { bv.t() } else { bv };
    let mut cv = ArrayViewMut2::from_shape((av.nrows(), bv.ncols()), c).expect("gemm out shape");
    general_mat_mul(1.0, &av, &bv, if accumulate { 1.0 } else { 0.0 }, &mut cv);
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn rope_angle(pos: usize, pair: usize, head_dim: usize) -> (f64, f64) {
    let theta = pos as f64 * ROPE_BASE.powf(-((2 * pair) as f64) / head_dim as f64);
    theta.sin_cos()
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
        None => *slot = Some(delta.to_vec()),
    }
}

fn slot_mut(slot: &mut Option<Vec<f64>>, n: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; n])
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new(), param_nodes: vec![None; params.len()] }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> NodeId {
        debug_assert!(matches!(op, Op::Param(_)) || data.len() == shape.iter().product::<usize>());
        self.nodes.push(Node { shape, data, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        match self.nodes[id].op {
            Op::Param(i) => &self.params.get(i).value.data,
            _ => &self.nodes[id].data,
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn is_finite(&self, id: NodeId) -> bool {
        self.value(id).iter().all(|v| v.is_finite())
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t.shape, t.data, Op::Input)
    }

    pub fn param(&mut self, idx: usize) -> NodeId {
        if let Some(id) = self.param_nodes[idx] {
            return id;
        }
        let shape = self.params.get(idx).value.shape.clone();
        let id = self.push(shape, Vec::new(), Op::Param(idx));
        self.param_nodes[idx] = Some(id);
        id
    }

    /// Parameter by name; panics on unknown names, which are programming errors.
    pub fn named(&mut self, name: &str) -> NodeId {
        let idx = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.param(idx)
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(last(&xs), ws[0], "linear: input width {} vs weight {:?}", last(&xs), ws);
        let (n, k, m) = (rows(&xs), ws[0], ws[1]);
        let mut out = vec![0.0; n * m];
        gemm(self.value(x), (n, k), false, self.value(w), (k, m), false, &mut out, false);
        if let Some(b) = b {
            let bias = self.value(b);
            for row in out.chunks_mut(m) {
                row.iter_mut().zip(bias).for_each(|(o, bb)| *o += bb);
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = m;
        self.push(shape, out, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push(self.shape(a).to_vec(), out, Op::Add(a, b))
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).iter().map(|&v| v * sigmoid(v)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Silu(x))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out = self
            .value(x)
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_K * (v + 0.044715 * v * v * v)).tanh()))
            .collect();
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x))
    }

    /// Affine-free layer norm over the trailing axis.
    pub fn layer_norm(&mut self, x: NodeId) -> NodeId {
        let d = last(self.shape(x));
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        let mut rstd = Vec::with_capacity(xv.len() / d);
        for (row, o) in xv.chunks(d).zip(out.chunks_mut(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(r);
            o.iter_mut().zip(row).for_each(|(o, v)| *o = (v - mean) * r);
        }
        self.push(self.shape(x).to_vec(), out, Op::LayerNorm { x, rstd })
    }

    /// `x·(1 + scale) + shift`, with `[batch, feat]` modulation broadcast over the sequence.
    pub fn modulate(&mut self, x: NodeId, shift: NodeId, scale: NodeId) -> NodeId {
        let xs = self.shape(x).to_vec();
        let (bsz, seq, d) = (xs[0], xs[1], xs[2]);
        assert_eq!(self.shape(shift), [bsz, d]);
        assert_eq!(self.shape(scale), [bsz, d]);
        let (xv, sh, sc) = (self.value(x), self.value(shift), self.value(scale));
        let mut out = vec![0.0; xv.len()];
        for b in 0..bsz {
            for s in 0..seq {
                let o = (b * seq + s) * d;
                for f in 0..d {
                    out[o + f] = xv[o + f] * (1.0 + sc[b * d + f]) + sh[b * d + f];
                }
            }
        }
        self.push(xs, out, Op::Modulate { x, shift, scale })
    }

    /// `h + gate·y`, with a `[batch, feat]` gate broadcast over the sequence.
    pub fn gated_add(&mut self, h: NodeId, gate: NodeId, y: NodeId) -> NodeId {
        let hs = self.shape(h).to_vec();
        assert_eq!(hs, self.shape(y));
        let (bsz, seq, d) = (hs[0], hs[1], hs[2]);
        let (hv, gv, yv) = (self.value(h), self.value(gate), self.value(y));
        let mut out = hv.to_vec();
        for b in 0..bsz {
            for s in 0..seq {
                let o = (b * seq + s) * d;
                for f in 0..d {
                    out[o + f] += gv[b * d + f] * yv[o + f];
                }
            }
        }
        self.push(hs, out, Op::GatedAdd { h, gate, y })
    }

    /// Row lookup `table[ids]` producing `[batch, seq, feat]`.
    pub fn embed(&mut self, table: NodeId, ids: &[u32], batch: usize, seq: usize) -> NodeId {
        let ts = self.shape(table).to_vec();
        let d = ts[1];
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            assert!(id < ts[0], "embedding id {id} out of range");
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        self.push(vec![batch, seq, d], out, Op::Embed { table, ids: ids.to_vec() })
    }

    pub fn concat_last(&mut self, parts: &[NodeId]) -> NodeId {
        let n = rows(self.shape(parts[0]));
        let widths: Vec<usize> = parts.iter().map(|&p| last(self.shape(p))).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            assert_eq!(rows(self.shape(p)), n);
            let v = self.value(p);
            for r in 0..n {
                out[r * total + off..r * total + off + w].copy_from_slice(&v[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = self.shape(parts[0]).to_vec();
        *shape.last_mut().unwrap() = total;
        self.push(shape, out, Op::ConcatLast(parts.to_vec()))
    }

    /// Concatenates `[B,S1,D]` and `[B,S2,D]` along the sequence axis.
    pub fn concat_seq(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!((sa[0], sa[2]), (sb[0], sb[2]));
        let (bsz, d) = (sa[0], sa[2]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for i in 0..bsz {
            out.extend_from_slice(&av[i * sa[1] * d..(i + 1) * sa[1] * d]);
            out.extend_from_slice(&bv[i * sb[1] * d..(i + 1) * sb[1] * d]);
        }
        self.push(vec![bsz, sa[1] + sb[1], d], out, Op::ConcatSeq(a, b))
    }

    pub fn slice_seq(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xs = self.shape(x).to_vec();
        let (bsz, seq, d) = (xs[0], xs[1], xs[2]);
        assert!(start + len <= seq);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(bsz * len * d);
        for i in 0..bsz {
            let o = (i * seq + start) * d;
            out.extend_from_slice(&xv[o..o + len * d]);
        }
        self.push(vec![bsz, len, d], out, Op::SliceSeq { x, start })
    }

    pub fn slice_last(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xs = self.shape(x).to_vec();
        let w = last(&xs);
        assert!(start + len <= w);
        let out = self.value(x).chunks(w).flat_map(|r| r[start..start + len].iter().copied()).collect();
        let mut shape = xs;
        *shape.last_mut().unwrap() = len;
        self.push(shape, out, Op::SliceLast { x, start })
    }

    /// Rotary position embedding on `[B, S, heads·head_dim]`; `positions[s]` gives the position of slot `s`.
    pub fn rope(&mut self, x: NodeId, heads: usize, positions: &[usize]) -> NodeId {
        let xs = self.shape(x).to_vec();
        let (bsz, seq, d) = (xs[0], xs[1], xs[2]);
        assert_eq!(positions.len(), seq);
        let hd = d / heads;
        let xv = self.value(x);
        let mut out = xv.to_vec();
        for b in 0..bsz {
            for (s, &pos) in positions.iter().enumerate() {
                for h in 0..heads {
                    let o = (b * seq + s) * d + h * hd;
                    for i in 0..hd / 2 {
                        let (sin, cos) = rope_angle(pos, i, hd);
                        let (x0, x1) = (xv[o + 2 * i], xv[o + 2 * i + 1]);
                        out[o + 2 * i] = x0 * cos - x1 * sin;
                        out[o + 2 * i + 1] = x0 * sin + x1 * cos;
                    }
                }
            }
        }
        self.push(xs, out, Op::Rope { x, heads, positions: positions.to_vec() })
    }

    /// Bidirectional multi-head softmax attention on `[B, S, heads·head_dim]` inputs.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> NodeId {
        let qs = self.shape(q).to_vec();
        let (bsz, seq, d) = (qs[0], qs[1], qs[2]);
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; bsz * heads * seq * seq];
        let mut out = vec![0.0; qv.len()];
        for b in 0..bsz {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                for i in 0..seq {
                    let qi = &qv[(b * seq + i) * d + h * hd..][..hd];
                    let row = &mut p[i * seq..(i + 1) * seq];
                    let mut max = f64::NEG_INFINITY;
                    for (j, r) in row.iter_mut().enumerate() {
                        let kj = &kv[(b * seq + j) * d + h * hd..][..hd];
                        *r = scale * qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>();
                        max = max.max(*r);
                    }
                    let mut z = 0.0;
                    for r in row.iter_mut() {
                        *r = (*r - max).exp();
                        z += *r;
                    }
                    row.iter_mut().for_each(|r| *r /= z);
                    let oi = &mut out[(b * seq + i) * d + h * hd..][..hd];
                    for (j, &pj) in row.iter().enumerate() {
                        let vj = &vv[(b * seq + j) * d + h * hd..][..hd];
                        oi.iter_mut().zip(vj).for_each(|(o, x)| *o += pj * x);
                    }
                }
            }
        }
        self.push(qs, out, Op::Attention { q, k, v, heads, probs })
    }

    /// Multiplies sequence `b` by `factors[b]`.
    pub fn scale_seq(&mut self, x: NodeId, factors: &[f64]) -> NodeId {
        let xs = self.shape(x).to_vec();
        let per = xs[1..].iter().product::<usize>();
        assert_eq!(factors.len(), xs[0]);
        let out = self
            .value(x)
            .chunks(per)
            .zip(factors)
            .flat_map(|(c, &f)| c.iter().map(move |v| v * f))
            .collect();
        self.push(xs, out, Op::ScaleSeq { x, factors: factors.to_vec() })
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let w = last(self.shape(x));
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(w) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                z += *r;
            }
            row.iter_mut().for_each(|r| *r /= z);
        }
        self.push(self.shape(x).to_vec(), out, Op::Softmax(x))
    }

    /// `Σ_e gate[.., e] · experts[e]`.
    pub fn mix_experts(&mut self, gate: NodeId, experts: &[NodeId]) -> NodeId {
        let e_count = experts.len();
        assert_eq!(last(self.shape(gate)), e_count);
        let shape = self.shape(experts[0]).to_vec();
        let d = last(&shape);
        let n = rows(&shape);
        let gv = self.value(gate).to_vec();
        let mut out = vec![0.0; n * d];
        for (e, &ex) in experts.iter().enumerate() {
            let ev = self.value(ex);
            for r in 0..n {
                let g = gv[r * e_count + e];
                out[r * d..(r + 1) * d].iter_mut().zip(&ev[r * d..(r + 1) * d]).for_each(|(o, v)| *o += g * v);
            }
        }
        self.push(shape, out, Op::MixExperts { gate, experts: experts.to_vec() })
    }

    /// Values of every softmax node in creation order.
    pub fn softmax_values(&self) -> Vec<Vec<f64>> {
        self.nodes.iter().filter(|n| matches!(n.op, Op::Softmax(_))).map(|n| n.data.clone()).collect()
    }

    /// Reverse sweep from `seeds` (node, cotangent) to parameter gradients.
    pub fn backward(&self, seeds: &[(NodeId, &[f64])]) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        for &(id, cot) in seeds {
            let n: usize = self.nodes[id].shape.iter().product();
            if cot.len() != n {
                return Err(input(format!("cotangent has {} values, node expects {n}", cot.len())));
            }
            accumulate(&mut grads[id], cot);
        }
        let mut out = Gradients::zeros_like(self.params);
        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {}
                Op::Param(i) => out.blocks[*i].iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                Op::Linear { x, w, b } => {
                    let xs = &self.nodes[*x].shape;
                    let ws = &self.nodes[*w].shape;
                    let (n, k, m) = (rows(xs), ws[0], ws[1]);
                    let dx = slot_mut(&mut grads[*x], n * k);
                    gemm(&g, (n, m), false, self.value(*w), (k, m), true, dx, true);
                    let dw = slot_mut(&mut grads[*w], k * m);
                    gemm(self.value(*x), (n, k), true, &g, (n, m), false, dw, true);
                    if let Some(b) = b {
                        let db = slot_mut(&mut grads[*b], m);
                        for row in g.chunks(m) {
                            db.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[*a], &g);
                    accumulate(&mut grads[*b], &g);
                }
                Op::Silu(x) => {
                    let d: Vec<f64> = self
                        .value(*x)
                        .iter()
                        .zip(&g)
                        .map(|(&v, gg)| {
                            let s = sigmoid(v);
                            gg * s * (1.0 + v * (1.0 - s))
                        })
                        .collect();
                    accumulate(&mut grads[*x], &d);
                }
                Op::Gelu(x) => {
                    let d: Vec<f64> = self
                        .value(*x)
                        .iter()
                        .zip(&g)
                        .map(|(&v, gg)| {
                            let th = (GELU_K * (v + 0.044715 * v * v * v)).tanh();
                            let dv = 0.5 * (1.0 + th)
                                + 0.5 * v * (1.0 - th * th) * GELU_K * (1.0 + 3.0 * 0.044715 * v * v);
                            gg * dv
                        })
                        .collect();
                    accumulate(&mut grads[*x], &d);
                }
                Op::LayerNorm { x, rstd } => {
                    let d = last(&node.shape);
                    let y = &node.data;
                    let dx = slot_mut(&mut grads[*x], y.len());
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gy = &g[r * d..(r + 1) * d];
                        let yy = &y[r * d..(r + 1) * d];
                        let mg = gy.iter().sum::<f64>() / d as f64;
                        let mgy = gy.iter().zip(yy).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for f in 0..d {
                            dx[r * d + f] += rs * (gy[f] - mg - yy[f] * mgy);
                        }
                    }
                }
                Op::Modulate { x, shift, scale } => {
                    let (bsz, seq, d) = (node.shape[0], node.shape[1], node.shape[2]);
                    let xv = self.value(*x);
                    let sc = self.value(*scale);
                    let mut dx = vec![0.0; g.len()];
                    let mut dsh = vec![0.0; bsz * d];
                    let mut dsc = vec![0.0; bsz * d];
                    for b in 0..bsz {
                        for s in 0..seq {
                            let o = (b * seq + s) * d;
                            for f in 0..d {
                                let gg = g[o + f];
                                dx[o + f] = gg * (1.0 + sc[b * d + f]);
                                dsh[b * d + f] += gg;
                                dsc[b * d + f] += gg * xv[o + f];
                            }
                        }
                    }
                    accumulate(&mut grads[*x], &dx);
                    accumulate(&mut grads[*shift], &dsh);
                    accumulate(&mut grads[*scale], &dsc);
                }
                Op::GatedAdd { h, gate, y } => {
                    let (bsz, seq, d) = (node.shape[0], node.shape[1], node.shape[2]);
                    let gv = self.value(*gate);
                    let yv = self.value(*y);
                    let mut dy = vec![0.0; g.len()];
                    let mut dg = vec![0.0; bsz * d];
                    for b in 0..bsz {
                        for s in 0..seq {
                            let o = (b * seq + s) * d;
                            for f in 0..d {
                                dy[o + f] = g[o + f] * gv[b * d + f];
                                dg[b * d + f] += g[o + f] * yv[o + f];
                            }
                        }
                    }
                    accumulate(&mut grads[*h], &g);
                    accumulate(&mut grads[*gate], &dg);
                    accumulate(&mut grads[*y], &dy);
                }
                Op::Embed { table, ids } => {
                    let ts = &self.nodes[*table].shape;
                    let d = ts[1];
                    let dt = slot_mut(&mut grads[*table], ts[0] * d);
                    for (r, &id) in ids.iter().enumerate() {
                        let id = id as usize;
                        dt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, b)| *a += b);
                    }
                }
                Op::ConcatLast(parts) => {
                    let total = last(&node.shape);
                    let n = rows(&node.shape);
                    let mut off = 0;
                    for &p in parts {
                        let w = last(&self.nodes[p].shape);
                        let dp = slot_mut(&mut grads[p], n * w);
                        for r in 0..n {
                            dp[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(&g[r * total + off..r * total + off + w])
                                .for_each(|(a, b)| *a += b);
                        }
                        off += w;
                    }
                }
                Op::ConcatSeq(a, b) => {
                    let (sa, sb) = (self.nodes[*a].shape[1], self.nodes[*b].shape[1]);
                    let (bsz, d) = (node.shape[0], node.shape[2]);
                    let mut da = Vec::with_capacity(bsz * sa * d);
                    let mut db = Vec::with_capacity(bsz * sb * d);
                    for i in 0..bsz {
                        let o = i * (sa + sb) * d;
                        da.extend_from_slice(&g[o..o + sa * d]);
                        db.extend_from_slice(&g[o + sa * d..o + (sa + sb) * d]);
                    }
                    accumulate(&mut grads[*a], &da);
                    accumulate(&mut grads[*b], &db);
                }
                Op::SliceSeq { x, start } => {
                    let xs = &self.nodes[*x].shape;
                    let (bsz, seq, d) = (xs[0], xs[1], xs[2]);
                    let len = node.shape[1];
                    let dx = slot_mut(&mut grads[*x], bsz * seq * d);
                    for i in 0..bsz {
                        let o = (i * seq + start) * d;
                        dx[o..o + len * d].iter_mut().zip(&g[i * len * d..(i + 1) * len * d]).for_each(|(a, b)| *a += b);
                    }
                }
                Op::SliceLast { x, start } => {
                    let w = last(&self.nodes[*x].shape);
                    let len = last(&node.shape);
                    let n = rows(&node.shape);
                    let dx = slot_mut(&mut grads[*x], n * w);
                    for r in 0..n {
                        dx[r * w + start..r * w + start + len]
                            .iter_mut()
                            .zip(&g[r * len..(r + 1) * len])
                            .for_each(|(a, b)| *a += b);
                    }
                }
                Op::Rope { x, heads, positions } => {
                    let (bsz, seq, d) = (node.shape[0], node.shape[1], node.shape[2]);
                    let hd = d / heads;
                    let mut dx = g.clone();
                    for b in 0..bsz {
                        for (s, &pos) in positions.iter().enumerate() {
                            for h in 0..*heads {
                                let o = (b * seq + s) * d + h * hd;
                                for i in 0..hd / 2 {
                                    let (sin, cos) = rope_angle(pos, i, hd);
                                    let (g0, g1) = (g[o + 2 * i], g[o + 2 * i + 1]);
                                    dx[o + 2 * i] = g0 * cos + g1 * sin;
                                    dx[o + 2 * i + 1] = -g0 * sin + g1 * cos;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[*x], &dx);
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (bsz, seq, d) = (node.shape[0], node.shape[1], node.shape[2]);
                    let hd = d / heads;
                    let scale = 1.0 / (hd as f64).sqrt();
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let mut dq = vec![0.0; g.len()];
                    let mut dk = vec![0.0; g.len()];
                    let mut dv = vec![0.0; g.len()];
                    let mut dp = vec![0.0; seq];
                    for b in 0..bsz {
                        for h in 0..*heads {
                            let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                            for i in 0..seq {
                                let gi = &g[(b * seq + i) * d + h * hd..][..hd];
                                let row = &p[i * seq..(i + 1) * seq];
                                let mut dot_pg = 0.0;
                                for j in 0..seq {
                                    let vj = &vv[(b * seq + j) * d + h * hd..][..hd];
                                    dp[j] = gi.iter().zip(vj).map(|(a, c)| a * c).sum();
                                    dot_pg += dp[j] * row[j];
                                    let dvj = &mut dv[(b * seq + j) * d + h * hd..][..hd];
                                    dvj.iter_mut().zip(gi).for_each(|(a, gg)| *a += row[j] * gg);
                                }
                                let qi_off = (b * seq + i) * d + h * hd;
                                for j in 0..seq {
                                    let ds = row[j] * (dp[j] - dot_pg) * scale;
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    let kj_off = (b * seq + j) * d + h * hd;
                                    for f in 0..hd {
                                        dq[qi_off + f] += ds * kv[kj_off + f];
                                        dk[kj_off + f] += ds * qv[qi_off + f];
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[*q], &dq);
                    accumulate(&mut grads[*k], &dk);
                    accumulate(&mut grads[*v], &dv);
                }
                Op::ScaleSeq { x, factors } => {
                    let per = node.shape[1..].iter().product::<usize>();
                    let dx: Vec<f64> = g
                        .chunks(per)
                        .zip(factors)
                        .flat_map(|(c, &f)| c.iter().map(move |v| v * f))
                        .collect();
                    accumulate(&mut grads[*x], &dx);
                }
                Op::Softmax(x) => {
                    let w = last(&node.shape);
                    let mut dx = vec![0.0; g.len()];
                    for ((y, gg), o) in node.data.chunks(w).zip(g.chunks(w)).zip(dx.chunks_mut(w)) {
                        let s: f64 = y.iter().zip(gg).map(|(a, b)| a * b).sum();
                        for f in 0..w {
                            o[f] = y[f] * (gg[f] - s);
                        }
                    }
                    accumulate(&mut grads[*x], &dx);
                }
                Op::MixExperts { gate, experts } => {
                    let e_count = experts.len();
                    let d = last(&node.shape);
                    let n = rows(&node.shape);
                    let gv = self.value(*gate);
                    let mut dg = vec![0.0; n * e_count];
                    for (e, &ex) in experts.iter().enumerate() {
                        let ev = self.value(ex);
                        let mut de = vec![0.0; n * d];
                        for r in 0..n {
                            let gr = &g[r * d..(r + 1) * d];
                            dg[r * e_count + e] = gr.iter().zip(&ev[r * d..(r + 1) * d]).map(|(a, b)| a * b).sum();
                            let w = gv[r * e_count + e];
                            de[r * d..(r + 1) * d].iter_mut().zip(gr).for_each(|(o, x)| *o = w * x);
                        }
                        accumulate(&mut grads[ex], &de);
                    }
                    accumulate(&mut grads[*gate], &dg);
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use crate::rng::SeedStream;

    /// Central-difference check of d(⟨c, f(θ)⟩)/dθ for every parameter entry.
    fn check(params: &mut ParamStore, build: &dyn Fn(&mut Tape) -> NodeId) {
        let (cot, analytic) = {
            let mut tape = Tape::new(params);
            let out = build(&mut tape);
            let n = tape.value(out).len();
            let cot: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect();
            let g = tape.backward(&[(out, &cot)]).unwrap();
            (cot, g)
        };
        let eval = |p: &ParamStore| {
            let mut tape = Tape::new(p);
            let out = build(&mut tape);
            tape.value(out).iter().zip(&cot).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-5;
        for i in 0..params.len() {
            for j in 0..params.get(i).value.numel() {
                let orig = params.get(i).value.data[j];
                params.value_mut(i).data[j] = orig + h;
                let up = eval(params);
                params.value_mut(i).data[j] = orig - h;
                let down = eval(params);
                params.value_mut(i).data[j] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = analytic.blocks[i][j];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + an.abs()),
                    "{}[{j}]: fd {fd} vs analytic {an}",
                    params.get(i).name
                );
            }
        }
    }

    fn store(shapes: &[(&str, &[usize])]) -> ParamStore {
        let mut p = ParamStore::new();
        for (n, s) in shapes {
            p.add(*n, s, Init::TruncNormal(0.5), SeedStream::new(9));
        }
        p.randomize(0.7, SeedStream::new(4));
        p
    }

    #[test]
    fn elementwise_and_norm_ops() {
        let mut p = store(&[("x", &[2, 3, 4]), ("w", &[4, 4]), ("b", &[4]), ("sh", &[2, 4]), ("sc", &[2, 4]), ("gate", &[2, 4])]);
        check(&mut p, &|t| {
            let (x, w, b) = (t.named("x"), t.named("w"), t.named("b"));
            let (sh, sc, gt) = (t.named("sh"), t.named("sc"), t.named("gate"));
            let y = t.linear(x, w, Some(b));
            let y = t.gelu(y);
            let n = t.layer_norm(y);
            let m = t.modulate(n, sh, sc);
            let s = t.silu(m);
            let s = t.softmax(s);
            let y2 = t.gated_add(x, gt, s);
            t.scale_seq(y2, &[0.5, -2.0])
        });
    }

    #[test]
    fn shape_ops() {
        let mut p = store(&[("table", &[5, 3]), ("a", &[2, 4, 3]), ("c", &[2, 2, 3])]);
        check(&mut p, &|t| {
            let tab = t.named("table");
            let e = t.embed(tab, &[0, 4, 4, 1, 2, 3, 0, 0], 2, 4);
            let a = t.named("a");
            let cat = t.concat_last(&[e, a]);
            let s = t.slice_last(cat, 1, 4);
            let c = t.named("c");
            let c2 = t.concat_last(&[c, c]);
            let c2 = t.slice_last(c2, 0, 3);
            let c3 = t.concat_last(&[c2, c2]);
            let c3 = t.slice_last(c3, 1, 4);
            let j = t.concat_seq(s, c3);
            let sl = t.slice_seq(j, 3, 2);
            t.gelu(sl)
        });
    }

    #[test]
    fn attention_rope_and_experts() {
        let mut p = store(&[("q", &[2, 3, 8]), ("k", &[2, 3, 8]), ("v", &[2, 3, 8]), ("g", &[2, 3, 2]), ("e2", &[2, 3, 8])]);
        check(&mut p, &|t| {
            let (q, k, v) = (t.named("q"), t.named("k"), t.named("v"));
            let q = t.rope(q, 2, &[0, 1, 2]);
            let k = t.rope(k, 2, &[0, 1, 1]);
            let o = t.attention(q, k, v, 2);
            let g = t.named("g");
            let g = t.softmax(g);
            let e2 = t.named("e2");
            t.mix_experts(g, &[o, e2])
        });
    }

    #[test]
    fn cotangent_shape_is_checked() {
        let p = store(&[("x", &[2, 2])]);
        let mut t = Tape::new(&p);
        let x = t.named("x");
        let y = t.silu(x);
        assert!(t.backward(&[(y, &[1.0; 3])]).is_err());
    }
}
