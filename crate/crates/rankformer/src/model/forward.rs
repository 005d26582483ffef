//! Forward passes. A batch of lists is flattened into one row matrix so
//! the dense layers run as single matmuls; attention and the losses see
//! the per-list block structure through a [`BlockLayout`].

use ndarray::{Array2, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;

use crate::dataset::Batch;
use crate::model::{
    AttentionParams, HeadParams, LinearParams, Model, ModelParams, ModelSpec, RankFormerDims,
    RankFormerParams, TransformerLayerParams,
};
use crate::tape::{BlockLayout, NodeId, Tape};
use crate::{Error, Result, Scalar};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Dropout is active only in training mode.
pub enum Mode<'a> {
    Eval,
    Train { dropout: f64, rng: &'a mut ChaCha8Rng },
}

impl Mode<'_> {
    fn apply<F: Scalar>(&mut self, tape: &mut Tape<F>, node: NodeId) -> NodeId {
        match self {
            Mode::Eval => node,
            Mode::Train { dropout, rng } => tape.dropout(node, *dropout, rng),
        }
    }
}

/// Handles into a built forward graph plus the row bookkeeping needed to
/// slice per-list outputs back out.
pub struct BatchForward {
    /// (total_item_rows, 1) node of per-item scores; padding rows hold
    /// meaningless values and are never read.
    pub scores: NodeId,
    /// (num_lists, y_max) node of listwide probabilities, transformer only.
    pub listwide: Option<NodeId>,
    /// First score row of each list.
    pub item_offsets: Vec<usize>,
    /// Real (unpadded) item count of each list.
    pub real_lens: Vec<usize>,
}

impl BatchForward {
    pub fn scores_per_list<F: Scalar>(&self, tape: &Tape<F>, batch: &Batch<F>) -> Vec<Vec<F>> {
        let values = tape.value(self.scores);
        (0..batch.num_lists())
            .map(|b| {
                (0..self.real_lens[b])
                    .map(|i| values[[self.item_offsets[b] + i, 0]])
                    .collect()
            })
            .collect()
    }

    pub fn listwide_per_list<F: Scalar>(&self, tape: &Tape<F>) -> Option<Vec<Vec<F>>> {
        self.listwide.map(|node| {
            let values = tape.value(node);
            (0..values.shape()[0])
                .map(|b| {
                    (0..values.shape()[1])
                        .map(|j| values[[b, j]])
                        .collect()
                })
                .collect()
        })
    }
}

fn linear<F: Scalar>(tape: &mut Tape<F>, x: NodeId, params: &LinearParams<F>) -> NodeId {
    let w = tape.leaf(params.weight.clone());
    let b = tape.leaf(params.bias.clone());
    let wx = tape.matmul(x, w);
    tape.add_row(wx, b)
}

fn head<F: Scalar>(tape: &mut Tape<F>, x: NodeId, params: &HeadParams<F>) -> NodeId {
    let hidden = linear(tape, x, &params.hidden);
    let hidden = tape.gelu(hidden);
    linear(tape, hidden, &params.output)
}

/// One encoder layer. The printed composition puts the layer input on the
/// feed-forward residual; `standard_preln` switches to the attention
/// output instead.
fn encoder_layer<F: Scalar>(
    tape: &mut Tape<F>,
    x: NodeId,
    params: &TransformerLayerParams<F>,
    layout: &BlockLayout,
    n_heads: usize,
    standard_preln: bool,
    mode: &mut Mode<'_>,
    probe: Option<&mut Vec<Array2<F>>>,
) -> Result<NodeId> {
    let eps = F::from(LAYER_NORM_EPS).unwrap();

    let norm1_scale = tape.leaf(params.norm1.scale.clone());
    let norm1_shift = tape.leaf(params.norm1.shift.clone());
    let normed = tape.layer_norm(x, norm1_scale, norm1_shift, eps);
    let q = linear(tape, normed, &params.attention.query);
    let k = linear(tape, normed, &params.attention.key);
    let v = linear(tape, normed, &params.attention.value);
    let attended = tape.block_attention(q, k, v, layout, n_heads, probe)?;
    let projected = linear(tape, attended, &params.attention.output);
    let projected = tape.zero_rows(projected, &layout.row_mask);
    let projected = mode.apply(tape, projected);
    let after_attention = tape.add(x, projected);

    let norm2_scale = tape.leaf(params.norm2.scale.clone());
    let norm2_shift = tape.leaf(params.norm2.shift.clone());
    let normed2 = tape.layer_norm(after_attention, norm2_scale, norm2_shift, eps);
    let ff_hidden = linear(tape, normed2, &params.ff1);
    let ff_hidden = tape.gelu(ff_hidden);
    let ff_out = linear(tape, ff_hidden, &params.ff2);
    let ff_out = tape.zero_rows(ff_out, &layout.row_mask);
    let ff_out = mode.apply(tape, ff_out);

    let base = if standard_preln { after_attention } else { x };
    Ok(tape.add(base, ff_out))
}

fn check_batch<F: Scalar>(batch: &Batch<F>, d_x: usize) -> Result<()> {
    if batch.num_lists() == 0 {
        return Err(Error::EmptyInput("empty batch".into()));
    }
    if batch.d_x() != d_x {
        return Err(Error::DimMismatch(format!(
            "model expects d_x={} but batch has {}",
            d_x,
            batch.d_x()
        )));
    }
    if batch.lengths.iter().any(|&l| l == 0) {
        return Err(Error::EmptyInput("batch contains an empty list".into()));
    }
    Ok(())
}

fn rankformer_layout<F: Scalar>(batch: &Batch<F>) -> BlockLayout {
    let n = batch.num_lists();
    let stride = 1 + batch.l_max();
    let mut row_mask = Vec::with_capacity(n * stride);
    for b in 0..n {
        row_mask.push(true); // CLS row
        for i in 0..batch.l_max() {
            row_mask.push(batch.mask[[b, i]]);
        }
    }
    BlockLayout {
        offsets: (0..n).map(|b| b * stride).collect(),
        lens: vec![stride; n],
        row_mask,
        with_cls: true,
    }
}

fn rankformer_batch_forward<F: Scalar>(
    tape: &mut Tape<F>,
    params: &RankFormerParams<F>,
    dims: &RankFormerDims,
    batch: &Batch<F>,
    mode: &mut Mode<'_>,
    mut probe: Option<&mut Vec<Array2<F>>>,
) -> Result<BatchForward> {
    check_batch(batch, dims.d_x)?;
    let n = batch.num_lists();
    let l_max = batch.l_max();
    let layout = rankformer_layout(batch);
    let rows = layout.total_rows();

    // Item features with zeroed CLS slots, plus a selector column that
    // broadcasts the learnable CLS row into those slots.
    let mut features = Array2::<F>::zeros((rows, dims.d_x));
    let mut selector = Array2::<F>::zeros((rows, 1));
    for b in 0..n {
        let base = layout.offsets[b];
        selector[[base, 0]] = F::one();
        for i in 0..batch.lengths[b] {
            for j in 0..dims.d_x {
                features[[base + 1 + i, j]] = batch.features[[b, i, j]];
            }
        }
    }
    let features = tape.constant(features.into_dyn());
    let selector = tape.constant(selector.into_dyn());
    let cls = tape.leaf(params.cls.clone());
    let cls_rows = tape.matmul(selector, cls);
    let mut x = tape.add(features, cls_rows);

    for layer in &params.layers {
        x = encoder_layer(
            tape,
            x,
            layer,
            &layout,
            dims.n_heads,
            dims.standard_preln,
            mode,
            probe.as_deref_mut(),
        )?;
    }

    let concat = tape.concat_cls_rows(x, &layout);
    let scores = head(tape, concat, &params.score_head);

    let cls_out = tape.gather_rows(x, &layout.offsets);
    let listwide_logits = head(tape, cls_out, &params.listwide_head);
    let listwide = tape.sigmoid(listwide_logits);

    Ok(BatchForward {
        scores,
        listwide: Some(listwide),
        item_offsets: (0..n).map(|b| b * l_max).collect(),
        real_lens: batch.lengths.clone(),
    })
}

fn mlp_batch_forward<F: Scalar>(
    tape: &mut Tape<F>,
    params: &crate::model::MlpParams<F>,
    d_x: usize,
    batch: &Batch<F>,
    mode: &mut Mode<'_>,
) -> Result<BatchForward> {
    check_batch(batch, d_x)?;
    let n = batch.num_lists();
    let l_max = batch.l_max();
    let rows = n * l_max;
    let mut features = Array2::<F>::zeros((rows, d_x));
    for b in 0..n {
        for i in 0..batch.lengths[b] {
            for j in 0..d_x {
                features[[b * l_max + i, j]] = batch.features[[b, i, j]];
            }
        }
    }
    let mut x = tape.constant(features.into_dyn());
    for layer in &params.hidden {
        x = linear(tape, x, layer);
        x = tape.gelu(x);
        x = mode.apply(tape, x);
    }
    let scores = linear(tape, x, &params.output);

    Ok(BatchForward {
        scores,
        listwide: None,
        item_offsets: (0..n).map(|b| b * l_max).collect(),
        real_lens: batch.lengths.clone(),
    })
}

/// Builds the forward graph of a model over a padded batch.
pub fn batch_forward<F: Scalar>(
    tape: &mut Tape<F>,
    model: &Model<F>,
    batch: &Batch<F>,
    mut mode: Mode<'_>,
    probe: Option<&mut Vec<Array2<F>>>,
) -> Result<BatchForward> {
    match (&model.spec, &model.params) {
        (ModelSpec::RankFormer(dims), ModelParams::RankFormer(params)) => {
            rankformer_batch_forward(tape, params, dims, batch, &mut mode, probe)
        }
        (ModelSpec::Mlp(dims), ModelParams::Mlp(params)) => {
            mlp_batch_forward(tape, params, dims.d_x, batch, &mut mode)
        }
        _ => Err(Error::Config("model spec and params kind mismatch".into())),
    }
}

fn single_list_batch<F: Scalar>(features: ArrayView2<'_, F>) -> Result<Batch<F>> {
    let n = features.nrows();
    if n == 0 {
        return Err(Error::EmptyInput("forward pass on empty list".into()));
    }
    Ok(Batch {
        features: features.to_owned().insert_axis(Axis(0)),
        mask: Array2::from_elem((1, n), true),
        explicit: Array2::zeros((1, n)),
        implicit: None,
        listwide: vec![None],
        lengths: vec![n],
        query_ids: vec![String::new()],
    })
}

/// Scores and listwide prediction for a single list. The CLS row is added
/// internally; scores cover exactly the given rows.
pub fn rankformer_forward<F: Scalar>(
    params: &RankFormerParams<F>,
    dims: &RankFormerDims,
    features: ArrayView2<'_, F>,
    mut mode: Mode<'_>,
) -> Result<(Vec<F>, Vec<F>)> {
    let batch = single_list_batch(features)?;
    let mut tape = Tape::new();
    let fwd = rankformer_batch_forward(&mut tape, params, dims, &batch, &mut mode, None)?;
    let scores = fwd.scores_per_list(&tape, &batch).remove(0);
    let listwide = fwd.listwide_per_list(&tape).unwrap().remove(0);
    Ok((scores, listwide))
}

/// Pointwise MLP scores for a single list.
pub fn mlp_forward<F: Scalar>(
    params: &crate::model::MlpParams<F>,
    features: ArrayView2<'_, F>,
    mut mode: Mode<'_>,
) -> Result<Vec<F>> {
    let batch = single_list_batch(features)?;
    let d_x = features.ncols();
    let mut tape = Tape::new();
    let fwd = mlp_batch_forward(&mut tape, params, d_x, &batch, &mut mode)?;
    Ok(fwd.scores_per_list(&tape, &batch).remove(0))
}

/// Masked multi-head self-attention over one list, including the output
/// projection. Masked positions receive exactly zero attention weight and
/// produce zero output rows.
pub fn self_attention<F: Scalar>(
    x: ArrayView2<'_, F>,
    mask: &[bool],
    params: &AttentionParams<F>,
    n_heads: usize,
) -> Result<Array2<F>> {
    if x.nrows() != mask.len() {
        return Err(Error::DimMismatch(format!(
            "{} rows vs {} mask entries",
            x.nrows(),
            mask.len()
        )));
    }
    let layout = BlockLayout {
        offsets: vec![0],
        lens: vec![x.nrows()],
        row_mask: mask.to_vec(),
        with_cls: false,
    };
    let mut tape = Tape::new();
    let xn = tape.constant(x.to_owned().into_dyn());
    let q = linear(&mut tape, xn, &params.query);
    let k = linear(&mut tape, xn, &params.key);
    let v = linear(&mut tape, xn, &params.value);
    let att = tape.block_attention(q, k, v, &layout, n_heads, None)?;
    let out = linear(&mut tape, att, &params.output);
    let out = tape.zero_rows(out, &layout.row_mask);
    Ok(tape
        .value(out)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .to_owned())
}

/// Attention weights per head for one list; rows are queries. Test and
/// inspection helper.
pub fn self_attention_weights<F: Scalar>(
    x: ArrayView2<'_, F>,
    mask: &[bool],
    params: &AttentionParams<F>,
    n_heads: usize,
) -> Result<Vec<Array2<F>>> {
    let layout = BlockLayout {
        offsets: vec![0],
        lens: vec![x.nrows()],
        row_mask: mask.to_vec(),
        with_cls: false,
    };
    let mut tape = Tape::new();
    let xn = tape.constant(x.to_owned().into_dyn());
    let q = linear(&mut tape, xn, &params.query);
    let k = linear(&mut tape, xn, &params.key);
    let v = linear(&mut tape, xn, &params.value);
    let mut probe = Vec::new();
    tape.block_attention(q, k, v, &layout, n_heads, Some(&mut probe))?;
    Ok(probe)
}

/// One encoder layer applied to a single (optionally masked) list.
pub fn transformer_layer<F: Scalar>(
    x: ArrayView2<'_, F>,
    mask: &[bool],
    params: &TransformerLayerParams<F>,
    n_heads: usize,
    standard_preln: bool,
    mut mode: Mode<'_>,
) -> Result<Array2<F>> {
    let layout = BlockLayout {
        offsets: vec![0],
        lens: vec![x.nrows()],
        row_mask: mask.to_vec(),
        with_cls: false,
    };
    let mut tape = Tape::new();
    let xn = tape.constant(x.to_owned().into_dyn());
    let out = encoder_layer(
        &mut tape,
        xn,
        params,
        &layout,
        n_heads,
        standard_preln,
        &mut mode,
        None,
    )?;
    Ok(tape
        .value(out)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .to_owned())
}
