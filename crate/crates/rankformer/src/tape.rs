//! Minimal reverse-mode automatic differentiation over `ndarray` arrays.
//!
//! A [`Tape`] records a DAG of array-valued nodes. Leaves are either
//! parameters (gradients requested) or constants. Each op stores its value
//! and a backward closure that routes the incoming gradient to its parents.
//! Values are reference-counted so parameter tensors are shared with the
//! tape instead of copied.
//!
//! The op set is exactly what the ranking models need: dense matmul with a
//! row-broadcast bias, layer norm, GELU/sigmoid, dropout, per-list masked
//! multi-head attention over a flattened batch, CLS gather/concat, and the
//! two ranking losses with closed-form backward passes.

use std::sync::Arc;

use ndarray::{arr0, Array1, Array2, ArrayD, ArrayView2, Axis, Ix1, Ix2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::losses;
use crate::{Error, Result, Scalar};

pub type NodeId = usize;

type BackwardFn<F> = Box<dyn Fn(&ArrayD<F>, &mut dyn FnMut(NodeId, ArrayD<F>)) + Send>;

struct Node<F> {
    value: Arc<ArrayD<F>>,
    backward: Option<BackwardFn<F>>,
    requires_grad: bool,
}

/// Row layout of a flattened batch: each list occupies a contiguous block
/// of rows, optionally led by a CLS row; `row_mask` is false at padding.
#[derive(Debug, Clone)]
pub struct BlockLayout {
    pub offsets: Vec<usize>,
    pub lens: Vec<usize>,
    pub row_mask: Vec<bool>,
    pub with_cls: bool,
}

impl BlockLayout {
    pub fn num_blocks(&self) -> usize {
        self.offsets.len()
    }

    pub fn total_rows(&self) -> usize {
        self.row_mask.len()
    }

    /// Row range of one block.
    pub fn block_rows(&self, b: usize) -> std::ops::Range<usize> {
        self.offsets[b]..self.offsets[b] + self.lens[b]
    }

    /// Item rows of one block (CLS row skipped when present).
    pub fn item_rows(&self, b: usize) -> std::ops::Range<usize> {
        let skip = usize::from(self.with_cls);
        self.offsets[b] + skip..self.offsets[b] + self.lens[b]
    }
}

pub struct Gradients<F> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn take(&mut self, id: NodeId) -> Option<ArrayD<F>> {
        self.grads[id].take()
    }

    pub fn get(&self, id: NodeId) -> Option<&ArrayD<F>> {
        self.grads[id].as_ref()
    }
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

fn as2<F: Scalar>(v: &ArrayD<F>) -> ArrayView2<'_, F> {
    v.view().into_dimensionality::<Ix2>().expect("2-d node")
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(
        &mut self,
        value: ArrayD<F>,
        backward: Option<BackwardFn<F>>,
        requires_grad: bool,
    ) -> NodeId {
        self.nodes.push(Node {
            value: Arc::new(value),
            backward,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    /// A parameter leaf; its gradient is collected by [`Tape::backward`].
    pub fn leaf(&mut self, value: Arc<ArrayD<F>>) -> NodeId {
        self.nodes.push(Node {
            value,
            backward: None,
            requires_grad: true,
        });
        self.nodes.len() - 1
    }

    /// An input leaf; no gradient is tracked through it.
    pub fn constant(&mut self, value: ArrayD<F>) -> NodeId {
        self.push(value, None, false)
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<F> {
        &self.nodes[id].value
    }

    fn arc(&self, id: NodeId) -> Arc<ArrayD<F>> {
        Arc::clone(&self.nodes[id].value)
    }

    fn requires(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// `a @ b` for 2-d nodes.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.arc(a);
        let bv = self.arc(b);
        let value = as2(&av).dot(&as2(&bv)).into_dyn();
        let req = self.requires(&[a, b]);
        let a_req = self.nodes[a].requires_grad;
        let b_req = self.nodes[b].requires_grad;
        let backward: BackwardFn<F> = Box::new(move |grad, sink| {
            let g = as2(grad);
            if a_req {
                sink(a, g.dot(&as2(&bv).t()).into_dyn());
            }
            if b_req {
                sink(b, as2(&av).t().dot(&g).into_dyn());
            }
        });
        self.push(value, req.then_some(backward), req)
    }

    /// Elementwise sum of two same-shape nodes.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.arc(a);
        let bv = self.arc(b);
        let value = &*av + &*bv;
        let req = self.requires(&[a, b]);
        let a_req = self.nodes[a].requires_grad;
        let b_req = self.nodes[b].requires_grad;
        let backward: BackwardFn<F> = Box::new(move |grad, sink| {
            if a_req {
                sink(a, grad.clone());
            }
            if b_req {
                sink(b, grad.clone());
            }
        });
        self.push(value, req.then_some(backward), req)
    }

    /// Adds a 1-d bias node to every row of a 2-d node.
    pub fn add_row(&mut self, m: NodeId, row: NodeId) -> NodeId {
        let mv = self.arc(m);
        let rv = self.arc(row);
        let r1 = rv.view().into_dimensionality::<Ix1>().expect("1-d bias");
        let value = (&as2(&mv) + &r1).into_dyn();
        let req = self.requires(&[m, row]);
        let m_req = self.nodes[m].requires_grad;
        let r_req = self.nodes[row].requires_grad;
        let backward: BackwardFn<F> = Box::new(move |grad, sink| {
            if m_req {
                sink(m, grad.clone());
            }
            if r_req {
                sink(row, as2(grad).sum_axis(Axis(0)).into_dyn());
            }
        });
        self.push(value, req.then_some(backward), req)
    }

    /// Multiplies a node by a compile-time constant scalar.
    pub fn scale(&mut self, a: NodeId, c: F) -> NodeId {
        let av = self.arc(a);
        let value = av.mapv(|x| x * c);
        let req = self.nodes[a].requires_grad;
        let backward: BackwardFn<F> = Box::new(move |grad, sink| {
            sink(a, grad.mapv(|g| g * c));
        });
        self.push(value, req.then_some(backward), req)
    }

    /// GELU in its tanh form; smooth, so the derivative is exact.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let av = self.arc(a);
        let c = F::from(0.7978845608028654).unwrap(); // sqrt(2/pi)
        let coef = F::from(0.044715).unwrap();
        let half = F::from(0.5).unwrap();
        let t = av.mapv(|x| (c * (x + coef * x * x * x)).tanh());
        let value = ndarray::Zip::from(&*av)
            .and(&t)
            .map_collect(|&x, &th| half * x * (F::one() + th));
        let req = self.nodes[a].requires_grad;
        let backward: BackwardFn<F> = Box::new(move |grad, sink| {
            let three = F::from(3.0).unwrap();
            let dx = ndarray::Zip::from(&*av)
                .and(&t)
                .and(grad)
                .map_collect(|&x, &th, &g| {
                    let sech2 = F::one() - th * th;
                    let du = c * (F::one() + three * coef * x * x);
                    g * (half * (F::one() + th) + half * x * sech2 * du)
                });
            sink(a, dx);
        });
        self.push(value, req.then_some(backward), req)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let av = self.arc(a);
        let value = Arc::new(av.mapv(|x| {
            if x >= F::zero() {
                F::one() / (F::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (F::one() + e)
            }
        }));
        let out = Arc::clone(&value);
        let req = self.nodes[a].requires_grad;
        let backward: BackwardFn<F> = Box::new(move |grad, sink| {
            let dx = ndarray::Zip::from(&*out)
                .and(grad)
                .map_collect(|&s, &g| g * s * (F::one() - s));
            sink(a, dx);
        });
        self.nodes.push(Node {
            value,
            backward: req.then_some(backward),
            requires_grad: req,
        });
        self.nodes.len() - 1
    }

    /// Per-row layer norm over the feature axis of a 2-d node.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: F) -> NodeId {
        let xv = self.arc(x);
        let gv = self.arc(gamma);
        let bv = self.arc(beta);
        let x2 = as2(&xv);
        let (rows, cols) = x2.dim();
        let dim = F::from(cols).unwrap();

        let mut normalized = Array2::<F>::zeros((rows, cols));
        let mut inv_std = Array1::<F>::zeros(rows);
        for (r, row) in x2.rows().into_iter().enumerate() {
            let mean = row.sum() / dim;
            let var = row.fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / dim;
            let is = F::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for (c, &v) in row.iter().enumerate() {
                normalized[[r, c]] = (v - mean) * is;
            }
        }
        let g1 = gv.view().into_dimensionality::<Ix1>().unwrap();
        let b1 = bv.view().into_dimensionality::<Ix1>().unwrap();
        let value = (&normalized * &g1 + &b1).into_dyn();

        let req = self.requires(&[x, gamma, beta]);
        let x_req = self.nodes[x].requires_grad;
        let g_req = self.nodes[gamma].requires_grad;
        let b_req = self.nodes[beta].requires_grad;
        let normalized = Arc::new(normalized);
        let backward: BackwardFn<F> = Box::new(move |grad, sink| {
            let g2 = as2(grad);
            if b_req {
                sink(beta, g2.sum_axis(Axis(0)).into_dyn());
            }
            if g_req {
                sink(gamma, (&g2 * &*normalized).sum_axis(Axis(0)).into_dyn());
            }
            if x_req {
                let g1 = gv.view().into_dimensionality::<Ix1>().unwrap();
                let mut dx = Array2::<F>::zeros((rows, cols));
                for r in 0..rows {
                    let gr = g2.row(r);
                    let xh = normalized.row(r);
                    let mut mean_dxh = F::zero();
                    let mut mean_dxh_xh = F::zero();
                    for c in 0..cols {
                        let d = gr[c] * g1[c];
                        mean_dxh += d;
                        mean_dxh_xh += d * xh[c];
                    }
                    mean_dxh /= dim;
                    mean_dxh_xh /= dim;
                    for c in 0..cols {
                        let d = gr[c] * g1[c];
                        dx[[r, c]] = inv_std[r] * (d - mean_dxh - xh[c] * mean_dxh_xh);
                    }
                }
                sink(x, dx.into_dyn());
            }
        });
        self.push(value, req.then_some(backward), req)
    }

    /// Inverted dropout with keep probability `1 - p`; the mask is drawn
    /// once at graph build time.
    pub fn dropout(&mut self, a: NodeId, p: f64, rng: &mut ChaCha8Rng) -> NodeId {
        if p <= 0.0 {
            return a;
        }
        let av = self.arc(a);
        let keep = F::from(1.0 / (1.0 - p)).unwrap();
        let mask = Arc::new(av.mapv(|_| {
            if rng.gen::<f64>() < p {
                F::zero()
            } else {
                keep
            }
        }));
        let value = &*av * &*mask;
        let req = self.nodes[a].requires_grad;
        let backward: BackwardFn<F> = Box::new(move |grad, sink| {
            sink(a, grad * &*mask);
        });
        self.push(value, req.then_some(backward), req)
    }

    /// Zeroes the rows of a 2-d node where `keep` is false.
    pub fn zero_rows(&mut self, a: NodeId, keep: &[bool]) -> NodeId {
        let av = self.arc(a);
        let keep = Arc::new(keep.to_vec());
        let mut value = as2(&av).to_owned();
        for (r, &k) in keep.iter().enumerate() {
            if !k {
                value.row_mut(r).fill(F::zero());
            }
        }
        let req = self.nodes[a].requires_grad;
        let keep_b = Arc::clone(&keep);
        let backward: BackwardFn<F> = Box::new(move |grad, sink| {
            let mut dx = as2(grad).to_owned();
            for (r, &k) in keep_b.iter().enumerate() {
                if !k {
                    dx.row_mut(r).fill(F::zero());
                }
            }
            sink(a, dx.into_dyn());
        });
        self.push(value.into_dyn(), req.then_some(backward), req)
    }

    /// Gathers the given rows of a 2-d node into a new node.
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> NodeId {
        let av = self.arc(a);
        let idx = Arc::new(indices.to_vec());
        let a2 = as2(&av);
        let mut value = Array2::<F>::zeros((idx.len(), a2.ncols()));
        for (out_r, &r) in idx.iter().enumerate() {
            value.row_mut(out_r).assign(&a2.row(r));
        }
        let shape = (a2.nrows(), a2.ncols());
        let req = self.nodes[a].requires_grad;
        let backward: BackwardFn<F> = Box::new(move |grad, sink| {
            let g2 = as2(grad);
            let mut dx = Array2::<F>::zeros(shape);
            for (out_r, &r) in idx.iter().enumerate() {
                let mut target = dx.row_mut(r);
                target += &g2.row(out_r);
            }
            sink(a, dx.into_dyn());
        });
        self.push(value.into_dyn(), req.then_some(backward), req)
    }

    /// For every item row, concatenates its feature row with the CLS row of
    /// its block: `(total_item_rows, 2 d)`.
    pub fn concat_cls_rows(&mut self, a: NodeId, layout: &BlockLayout) -> NodeId {
        assert!(layout.with_cls, "concat_cls_rows needs CLS rows");
        let av = self.arc(a);
        let a2 = as2(&av);
        let d = a2.ncols();
        let layout_c = Arc::new(layout.clone());
        let total_items: usize = layout.lens.iter().map(|l| l - 1).sum();
        let mut value = Array2::<F>::zeros((total_items, 2 * d));
        let mut out_r = 0;
        for b in 0..layout.num_blocks() {
            let cls = layout.offsets[b];
            for r in layout.item_rows(b) {
                value
                    .row_mut(out_r)
                    .slice_mut(ndarray::s![..d])
                    .assign(&a2.row(r));
                value
                    .row_mut(out_r)
                    .slice_mut(ndarray::s![d..])
                    .assign(&a2.row(cls));
                out_r += 1;
            }
        }
        let rows = a2.nrows();
        let req = self.nodes[a].requires_grad;
        let backward: BackwardFn<F> = Box::new(move |grad, sink| {
            let g2 = as2(grad);
            let mut dx = Array2::<F>::zeros((rows, d));
            let mut out_r = 0;
            for b in 0..layout_c.num_blocks() {
                let cls = layout_c.offsets[b];
                for r in layout_c.item_rows(b) {
                    {
                        let mut row = dx.row_mut(r);
                        row += &g2.row(out_r).slice(ndarray::s![..d]);
                    }
                    {
                        let mut row = dx.row_mut(cls);
                        row += &g2.row(out_r).slice(ndarray::s![d..]);
                    }
                    out_r += 1;
                }
            }
            sink(a, dx.into_dyn());
        });
        self.push(value.into_dyn(), req.then_some(backward), req)
    }

    /// Scaled dot-product attention applied independently per block, with
    /// `n_heads` column partitions. Attention weights toward masked rows
    /// are exactly zero; masked query rows produce zero output. When a
    /// probe is supplied, the per-(block, head) weight matrices are copied
    /// out for inspection.
    pub fn block_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: &BlockLayout,
        n_heads: usize,
        mut probe: Option<&mut Vec<Array2<F>>>,
    ) -> Result<NodeId> {
        let qv = self.arc(q);
        let kv = self.arc(k);
        let vv = self.arc(v);
        let d = as2(&qv).ncols();
        if d % n_heads != 0 {
            return Err(Error::Config(format!(
                "model width {d} not divisible by {n_heads} heads"
            )));
        }
        let dh = d / n_heads;
        let scale = F::one() / F::from(dh).unwrap().sqrt();
        let layout_c = Arc::new(layout.clone());

        let q2 = as2(&qv);
        let k2 = as2(&kv);
        let v2 = as2(&vv);
        let mut value = Array2::<F>::zeros(q2.dim());
        let mut weights: Vec<Array2<F>> = Vec::with_capacity(layout.num_blocks() * n_heads);

        for b in 0..layout.num_blocks() {
            let range = layout.block_rows(b);
            let mask = &layout.row_mask[range.clone()];
            if !mask.iter().any(|&m| m) {
                return Err(Error::AllMasked);
            }
            for h in 0..n_heads {
                let cols = h * dh..(h + 1) * dh;
                let qb = q2.slice(ndarray::s![range.clone(), cols.clone()]);
                let kb = k2.slice(ndarray::s![range.clone(), cols.clone()]);
                let vb = v2.slice(ndarray::s![range.clone(), cols.clone()]);
                let len = range.len();
                let mut att = Array2::<F>::zeros((len, len));
                for i in 0..len {
                    if !mask[i] {
                        continue; // zero weights, zero output row
                    }
                    // logits over unmasked keys, max-subtracted
                    let mut max = F::neg_infinity();
                    let mut logits = vec![F::zero(); len];
                    for j in 0..len {
                        if mask[j] {
                            let l = qb.row(i).dot(&kb.row(j)) * scale;
                            logits[j] = l;
                            max = max.max(l);
                        }
                    }
                    let mut total = F::zero();
                    for j in 0..len {
                        if mask[j] {
                            let e = (logits[j] - max).exp();
                            att[[i, j]] = e;
                            total += e;
                        }
                    }
                    for j in 0..len {
                        att[[i, j]] = att[[i, j]] / total;
                    }
                }
                let out = att.dot(&vb);
                value
                    .slice_mut(ndarray::s![range.clone(), cols.clone()])
                    .assign(&out);
                if let Some(p) = probe.as_deref_mut() {
                    p.push(att.clone());
                }
                weights.push(att);
            }
        }

        let req = self.requires(&[q, k, v]);
        let q_req = self.nodes[q].requires_grad;
        let k_req = self.nodes[k].requires_grad;
        let v_req = self.nodes[v].requires_grad;
        let weights = Arc::new(weights);
        let backward: BackwardFn<F> = Box::new(move |grad, sink| {
            let g2 = as2(grad);
            let q2 = as2(&qv);
            let k2 = as2(&kv);
            let v2 = as2(&vv);
            let mut dq = Array2::<F>::zeros(q2.dim());
            let mut dk = Array2::<F>::zeros(k2.dim());
            let mut dv = Array2::<F>::zeros(v2.dim());
            for b in 0..layout_c.num_blocks() {
                let range = layout_c.block_rows(b);
                for h in 0..n_heads {
                    let cols = h * dh..(h + 1) * dh;
                    let att = &weights[b * n_heads + h];
                    let qb = q2.slice(ndarray::s![range.clone(), cols.clone()]);
                    let kb = k2.slice(ndarray::s![range.clone(), cols.clone()]);
                    let vb = v2.slice(ndarray::s![range.clone(), cols.clone()]);
                    let gb = g2.slice(ndarray::s![range.clone(), cols.clone()]);
                    // dV = A^T dO
                    if v_req {
                        let dvb = att.t().dot(&gb);
                        let mut target = dv.slice_mut(ndarray::s![range.clone(), cols.clone()]);
                        target += &dvb;
                    }
                    if q_req || k_req {
                        // dA = dO V^T, then the softmax Jacobian per row.
                        let da = gb.dot(&vb.t());
                        let len = range.len();
                        let mut ds = Array2::<F>::zeros((len, len));
                        for i in 0..len {
                            let mut dot = F::zero();
                            for j in 0..len {
                                dot += att[[i, j]] * da[[i, j]];
                            }
                            for j in 0..len {
                                ds[[i, j]] = att[[i, j]] * (da[[i, j]] - dot) * scale;
                            }
                        }
                        if q_req {
                            let dqb = ds.dot(&kb);
                            let mut target = dq.slice_mut(ndarray::s![range.clone(), cols.clone()]);
                            target += &dqb;
                        }
                        if k_req {
                            let dkb = ds.t().dot(&qb);
                            let mut target = dk.slice_mut(ndarray::s![range.clone(), cols.clone()]);
                            target += &dkb;
                        }
                    }
                }
            }
            if q_req {
                sink(q, dq.into_dyn());
            }
            if k_req {
                sink(k, dk.into_dyn());
            }
            if v_req {
                sink(v, dv.into_dyn());
            }
        });
        Ok(self.push(value.into_dyn(), req.then_some(backward), req))
    }

    /// Sum over blocks of the listwise Softmax loss. `scores` is a
    /// `(total_item_rows, 1)` node; each block contributes its first
    /// `real_lens[b]` rows (padding sits at the tail of every block).
    pub fn softmax_ranking_loss(
        &mut self,
        scores: NodeId,
        item_offsets: &[usize],
        real_lens: &[usize],
        labels: &[Vec<F>],
        list_ids: &[String],
    ) -> Result<NodeId> {
        let sv = self.arc(scores);
        let s2 = as2(&sv);
        let mut total = F::zero();
        for (b, (&off, &len)) in item_offsets.iter().zip(real_lens).enumerate() {
            let s: Vec<F> = (0..len).map(|i| s2[[off + i, 0]]).collect();
            let l = losses::softmax_loss(&s, &labels[b])?;
            if !l.is_finite() {
                return Err(Error::NonFinite {
                    list_id: list_ids[b].clone(),
                });
            }
            total += l;
        }
        let offsets = Arc::new(item_offsets.to_vec());
        let lens = Arc::new(real_lens.to_vec());
        let labels = Arc::new(labels.to_vec());
        let rows = s2.nrows();
        let req = self.nodes[scores].requires_grad;
        let backward: BackwardFn<F> = Box::new(move |grad, sink| {
            let g = *grad
                .iter()
                .next()
                .expect("scalar gradient");
            let s2 = as2(&sv);
            let mut dx = Array2::<F>::zeros((rows, 1));
            for (b, (&off, &len)) in offsets.iter().zip(lens.iter()).enumerate() {
                let s: Vec<F> = (0..len).map(|i| s2[[off + i, 0]]).collect();
                let gs = losses::softmax_loss_grad(&s, &labels[b]).expect("checked in forward");
                for (i, gi) in gs.into_iter().enumerate() {
                    dx[[off + i, 0]] = g * gi;
                }
            }
            sink(scores, dx.into_dyn());
        });
        Ok(self.push(arr0(total).into_dyn(), req.then_some(backward), req))
    }

    /// Sum over blocks of the ordinal BCE loss. `predictions` is a
    /// `(num_blocks, y_max)` node of probabilities.
    pub fn ordinal_bce_loss(
        &mut self,
        predictions: NodeId,
        targets: &[u8],
        list_ids: &[String],
    ) -> Result<NodeId> {
        let pv = self.arc(predictions);
        let p2 = as2(&pv);
        let mut total = F::zero();
        for (b, &t) in targets.iter().enumerate() {
            let row: Vec<F> = p2.row(b).to_vec();
            let l = losses::ordinal_loss(&row, t)?;
            if !l.is_finite() {
                return Err(Error::NonFinite {
                    list_id: list_ids[b].clone(),
                });
            }
            total += l;
        }
        let targets = Arc::new(targets.to_vec());
        let req = self.nodes[predictions].requires_grad;
        let backward: BackwardFn<F> = Box::new(move |grad, sink| {
            let g = *grad.iter().next().expect("scalar gradient");
            let p2 = as2(&pv);
            let mut dx = Array2::<F>::zeros(p2.dim());
            for (b, &t) in targets.iter().enumerate() {
                let row: Vec<F> = p2.row(b).to_vec();
                let gr = losses::ordinal_loss_grad(&row, t).expect("checked in forward");
                for (j, gj) in gr.into_iter().enumerate() {
                    dx[[b, j]] = g * gj;
                }
            }
            sink(predictions, dx.into_dyn());
        });
        Ok(self.push(arr0(total).into_dyn(), req.then_some(backward), req))
    }

    /// Reverse pass from a scalar root; returns per-node gradients for
    /// every `requires_grad` node reached.
    pub fn backward(&self, root: NodeId) -> Gradients<F> {
        assert_eq!(self.nodes[root].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<ArrayD<F>>> = vec![None; self.nodes.len()];
        grads[root] = Some(self.nodes[root].value.mapv(|_| F::one()));
        for id in (0..=root).rev() {
            if !self.nodes[id].requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(backward) = self.nodes[id].backward.as_ref() else {
                continue; // leaf: keep accumulated gradient
            };
            let Some(grad) = grads[id].take() else {
                continue; // not on a path to the root
            };
            backward(&grad, &mut |parent, contribution| {
                match &mut grads[parent] {
                    Some(existing) => *existing += &contribution,
                    slot @ None => *slot = Some(contribution),
                }
            });
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;

    /// Finite-difference harness: builds the graph twice per perturbed leaf
    /// entry and compares the analytic leaf gradients against central
    /// differences.
    fn fd_check(
        shapes: &[Vec<usize>],
        seed: u64,
        build: impl Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
    ) {
        let mut rng = stream_rng(seed, Stream::GradCheck, &[]);
        let mut values: Vec<ArrayD<f64>> = shapes
            .iter()
            .map(|s| {
                ArrayD::from_shape_fn(s.as_slice(), |_| rng.gen_range(-1.0..1.0))
            })
            .collect();

        let eval = |values: &[ArrayD<f64>]| -> f64 {
            let mut tape = Tape::new();
            let leaves: Vec<NodeId> = values
                .iter()
                .map(|v| tape.leaf(Arc::new(v.clone())))
                .collect();
            let root = build(&mut tape, &leaves);
            *tape.value(root).iter().next().unwrap()
        };

        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = values
            .iter()
            .map(|v| tape.leaf(Arc::new(v.clone())))
            .collect();
        let root = build(&mut tape, &leaves);
        let mut grads = tape.backward(root);

        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            // Logical (row-major) order; gradient arrays may carry
            // transposed strides after matmul backward passes.
            let analytic: Vec<f64> = grads
                .take(*leaf)
                .unwrap_or_else(|| ArrayD::zeros(values[li].shape()))
                .iter()
                .copied()
                .collect();
            for idx in 0..values[li].len() {
                let orig = values[li].as_slice().unwrap()[idx];
                values[li].as_slice_mut().unwrap()[idx] = orig + h;
                let plus = eval(&values);
                values[li].as_slice_mut().unwrap()[idx] = orig - h;
                let minus = eval(&values);
                values[li].as_slice_mut().unwrap()[idx] = orig;
                let fd = (plus - minus) / (2.0 * h);
                let a = analytic[idx];
                let denom = a.abs().max(fd.abs());
                let ok = if denom < 1e-6 {
                    (a - fd).abs() < 1e-7
                } else {
                    (a - fd).abs() / denom < 1e-5
                };
                assert!(ok, "leaf {li} entry {idx}: analytic {a} vs fd {fd}");
            }
        }
    }

    fn sum_all(tape: &mut Tape<f64>, node: NodeId) -> NodeId {
        // Reduce to a scalar through the loss-free path: weighted sum via
        // matmuls with fixed constants.
        let v = tape.value(node).clone();
        let dims = v.ndim();
        assert_eq!(dims, 2);
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let mut w1 = Array2::<f64>::zeros((c, 1));
        for i in 0..c {
            w1[[i, 0]] = 0.3 + 0.1 * i as f64;
        }
        let mut w2 = Array2::<f64>::zeros((1, r));
        for i in 0..r {
            w2[[0, i]] = 0.7 - 0.05 * i as f64;
        }
        let right = tape.constant(w1.into_dyn());
        let left = tape.constant(w2.into_dyn());
        let partial = tape.matmul(node, right);
        let scalar = tape.matmul(left, partial);
        // (1,1) node is fine as a backward root
        scalar
    }

    #[test]
    fn matmul_forward_and_backward() {
        let a = arr2(&[[1.0, 2.0], [3.0, 4.0]]);
        let b = arr2(&[[5.0, 6.0], [7.0, 8.0]]);
        let mut tape = Tape::new();
        let na = tape.leaf(Arc::new(a.into_dyn()));
        let nb = tape.leaf(Arc::new(b.into_dyn()));
        let c = tape.matmul(na, nb);
        assert_eq!(as2(tape.value(c)), arr2(&[[19.0, 22.0], [43.0, 50.0]]));
        fd_check(&[vec![3, 2], vec![2, 4]], 1, |t, l| {
            let m = t.matmul(l[0], l[1]);
            sum_all(t, m)
        });
    }

    #[test]
    fn add_and_bias_backward() {
        fd_check(&[vec![3, 4], vec![3, 4]], 2, |t, l| {
            let s = t.add(l[0], l[1]);
            sum_all(t, s)
        });
        fd_check(&[vec![3, 4], vec![4]], 3, |t, l| {
            let s = t.add_row(l[0], l[1]);
            sum_all(t, s)
        });
    }

    #[test]
    fn gelu_matches_reference_and_backward() {
        // Reference value of tanh-form GELU at 1.0.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Arc::new(arr2(&[[1.0]]).into_dyn()));
        let y = tape.gelu(x);
        assert_abs_diff_eq!(
            tape.value(y)[[0, 0]],
            0.8411919906082768,
            epsilon = 1e-12
        );
        fd_check(&[vec![2, 3]], 4, |t, l| {
            let g = t.gelu(l[0]);
            sum_all(t, g)
        });
    }

    #[test]
    fn sigmoid_backward() {
        fd_check(&[vec![2, 3]], 5, |t, l| {
            let s = t.sigmoid(l[0]);
            sum_all(t, s)
        });
    }

    #[test]
    fn layer_norm_normalizes_rows_and_backs_propagates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Arc::new(arr2(&[[1.0, 2.0, 3.0], [-1.0, 0.0, 1.0]]).into_dyn()));
        let gamma = tape.constant(ndarray::arr1(&[1.0, 1.0, 1.0]).into_dyn());
        let beta = tape.constant(ndarray::arr1(&[0.0, 0.0, 0.0]).into_dyn());
        let y = tape.layer_norm(x, gamma, beta, 0.0);
        let v = as2(tape.value(y)).to_owned();
        for row in v.rows() {
            let mean: f64 = row.sum() / 3.0;
            let var: f64 = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / 3.0;
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-10);
        }
        fd_check(&[vec![3, 4], vec![4], vec![4]], 6, |t, l| {
            let y = t.layer_norm(l[0], l[1], l[2], 1e-5);
            sum_all(t, y)
        });
    }

    #[test]
    fn zero_rows_and_gather_backward() {
        fd_check(&[vec![4, 3]], 7, |t, l| {
            let z = t.zero_rows(l[0], &[true, false, true, false]);
            sum_all(t, z)
        });
        fd_check(&[vec![4, 3]], 8, |t, l| {
            let g = t.gather_rows(l[0], &[2, 0, 2]);
            sum_all(t, g)
        });
    }

    fn two_block_layout() -> BlockLayout {
        // Two blocks with CLS rows: lens 3 (CLS+2 items) and 4 (CLS+2 items+1 pad)
        BlockLayout {
            offsets: vec![0, 3],
            lens: vec![3, 4],
            row_mask: vec![true, true, true, true, true, true, false],
            with_cls: true,
        }
    }

    #[test]
    fn concat_cls_rows_layout_and_backward() {
        let layout = two_block_layout();
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Arc::new(
            Array2::from_shape_fn((7, 2), |(r, c)| (r * 10 + c) as f64).into_dyn(),
        ));
        let out = tape.concat_cls_rows(x, &layout);
        let v = as2(tape.value(out)).to_owned();
        assert_eq!(v.dim(), (5, 4));
        // First item row of block 0 pairs row 1 with CLS row 0.
        assert_eq!(v.row(0).to_vec(), vec![10.0, 11.0, 0.0, 1.0]);
        // First item row of block 1 pairs row 4 with CLS row 3.
        assert_eq!(v.row(2).to_vec(), vec![40.0, 41.0, 30.0, 31.0]);
        let layout2 = layout.clone();
        fd_check(&[vec![7, 2]], 9, move |t, l| {
            let c = t.concat_cls_rows(l[0], &layout2);
            sum_all(t, c)
        });
    }

    #[test]
    fn block_attention_masks_exactly_and_backs_propagates() {
        let layout = two_block_layout();
        let mut tape = Tape::<f64>::new();
        let mut rng = stream_rng(10, Stream::GradCheck, &[]);
        let q = tape.leaf(Arc::new(ArrayD::from_shape_fn(
            vec![7, 4].as_slice(),
            |_| rng.gen_range(-1.0..1.0),
        )));
        let k = tape.leaf(Arc::new(ArrayD::from_shape_fn(
            vec![7, 4].as_slice(),
            |_| rng.gen_range(-1.0..1.0),
        )));
        let v = tape.leaf(Arc::new(ArrayD::from_shape_fn(
            vec![7, 4].as_slice(),
            |_| rng.gen_range(-1.0..1.0),
        )));
        let mut probe = Vec::new();
        let out = tape
            .block_attention(q, k, v, &layout, 2, Some(&mut probe))
            .unwrap();
        // Heads x blocks recorded; masked column of block 1 carries zero weight.
        assert_eq!(probe.len(), 4);
        for att in &probe[2..] {
            for i in 0..4 {
                assert_eq!(att[[i, 3]], 0.0, "masked key attracted weight");
            }
        }
        // Masked query row produces a zero output row.
        let val = as2(tape.value(out)).to_owned();
        for c in 0..4 {
            assert_eq!(val[[6, c]], 0.0);
        }

        let layout2 = layout.clone();
        fd_check(&[vec![7, 4], vec![7, 4], vec![7, 4]], 11, move |t, l| {
            let a = t
                .block_attention(l[0], l[1], l[2], &layout2, 2, None)
                .unwrap();
            sum_all(t, a)
        });
    }

    #[test]
    fn attention_errors_on_fully_masked_block() {
        let layout = BlockLayout {
            offsets: vec![0],
            lens: vec![2],
            row_mask: vec![false, false],
            with_cls: false,
        };
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Array2::<f64>::zeros((2, 2)).into_dyn());
        let err = tape.block_attention(x, x, x, &layout, 1, None);
        assert!(matches!(err, Err(Error::AllMasked)));
    }

    #[test]
    fn softmax_ranking_loss_value_and_gradient_contract() {
        // Scores (0,0) labels (1,0) -> ln 2; gradient (sum y) softmax - y.
        let mut tape = Tape::<f64>::new();
        let s = tape.leaf(Arc::new(arr2(&[[0.0], [0.0], [9.0]]).into_dyn()));
        let loss = tape
            .softmax_ranking_loss(
                s,
                &[0],
                &[2],
                &[vec![1.0, 0.0]],
                &["q".to_string()],
            )
            .unwrap();
        assert_abs_diff_eq!(
            tape.value(loss).iter().next().copied().unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-14
        );
        let mut grads = tape.backward(loss);
        let g = grads.take(s).unwrap();
        assert_abs_diff_eq!(g[[0, 0]], 0.5 - 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g[[1, 0]], 0.5, epsilon = 1e-12);
        // Row 2 is outside both blocks: untouched.
        assert_eq!(g[[2, 0]], 0.0);

        fd_check(&[vec![5, 1]], 12, |t, l| {
            t.softmax_ranking_loss(
                l[0],
                &[0, 3],
                &[3, 2],
                &[vec![1.0, 0.0, 2.0], vec![0.0, 1.0]],
                &["a".to_string(), "b".to_string()],
            )
            .unwrap()
        });
    }

    #[test]
    fn ordinal_bce_loss_backward() {
        fd_check(&[vec![3, 2]], 13, |t, l| {
            // Map leaves through a sigmoid so predictions stay in (0, 1).
            let p = t.sigmoid(l[0]);
            t.ordinal_bce_loss(p, &[0, 1, 2], &["a".into(), "b".into(), "c".into()])
                .unwrap()
        });
    }

    #[test]
    fn dropout_scales_and_masks() {
        let mut rng = stream_rng(14, Stream::Dropout, &[]);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Arc::new(ArrayD::from_elem(vec![50, 20].as_slice(), 1.0)));
        let y = tape.dropout(x, 0.25, &mut rng);
        let v = tape.value(y).clone();
        let kept = v.iter().filter(|&&e| e != 0.0).count();
        for &e in v.iter() {
            assert!(e == 0.0 || (e - 1.0 / 0.75).abs() < 1e-12);
        }
        let frac = kept as f64 / 1000.0;
        assert!((frac - 0.75).abs() < 0.06, "kept {frac}");
        // Gradient flows only through kept entries, scaled identically.
        let s = sum_all(&mut tape, y);
        let mut grads = tape.backward(s);
        let g = grads.take(x).unwrap();
        for (gv, vv) in g.iter().zip(v.iter()) {
            if *vv == 0.0 {
                assert_eq!(*gv, 0.0);
            }
        }
    }

    #[test]
    fn constant_subgraphs_produce_no_gradients() {
        let mut tape = Tape::<f64>::new();
        let c1 = tape.constant(arr2(&[[1.0, 2.0]]).into_dyn());
        let c2 = tape.constant(arr2(&[[3.0], [4.0]]).into_dyn());
        let prod = tape.matmul(c1, c2);
        let leaf = tape.leaf(Arc::new(arr2(&[[2.0]]).into_dyn()));
        let out = tape.add(prod, leaf);
        let grads = tape.backward(out);
        assert!(grads.get(c1).is_none());
        assert!(grads.get(leaf).is_some());
    }
}
