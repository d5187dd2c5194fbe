//! View-restricted multi-head attention and the baseline fusion layers.
//!
//! Each head groups its queries by modality. A group's visible keys are a
//! union of whole modality blocks, so the head gathers those keys and runs a
//! dense softmax over them; disallowed pairs are never computed. A group with
//! no visible keys outputs zeros.
//!
//! Layers are pre-norm residual blocks: `x + W_O [h_1; ...; h_n](LN(x))`
//! followed by `x + FFN(LN(x))` with a GELU feed-forward of width `d_ff`.

use crate::error::{Error, Result};
use crate::numerics::{FlopCounter, Mask, MatmulKind, Rng, Tensor};
use crate::tape::{Tape, Var};
use crate::viewconfig::{AttentionView, KeyScope, ModalityLayout, ViewAssignment};

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

impl HeadParams {
    pub fn d_head(&self) -> usize {
        self.wq.cols()
    }
}

/// Weights of one transformer layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub heads: Vec<HeadParams>,
    /// `(n_heads * d_head) x d`
    pub wo: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

impl LayerParams {
    /// Normal(0, `std`) weights, zero biases, unit norm gains.
    pub fn init(d: usize, n_heads: usize, d_ff: usize, std: f64, rng: &mut Rng) -> Result<Self> {
        if n_heads == 0 || !d.is_multiple_of(n_heads) {
            return Err(Error::Config(format!("d = {d} is not divisible into {n_heads} heads")));
        }
        let dh = d / n_heads;
        let heads = (0..n_heads)
            .map(|_| HeadParams {
                wq: rng.rand_normal(&[d, dh], std),
                wk: rng.rand_normal(&[d, dh], std),
                wv: rng.rand_normal(&[d, dh], std),
            })
            .collect();
        Ok(Self {
            heads,
            wo: rng.rand_normal(&[d, d], std),
            w1: rng.rand_normal(&[d, d_ff], std),
            b1: Tensor::zeros(&[d_ff]),
            w2: rng.rand_normal(&[d_ff, d], std),
            b2: Tensor::zeros(&[d]),
            ln1_gain: Tensor::full(&[d], 1.0),
            ln1_bias: Tensor::zeros(&[d]),
            ln2_gain: Tensor::full(&[d], 1.0),
            ln2_bias: Tensor::zeros(&[d]),
        })
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn d(&self) -> usize {
        self.wo.cols()
    }

    /// Every tensor with a stable name, in binding order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (h, head) in self.heads.iter().enumerate() {
            out.push((format!("head{h}.wq"), &head.wq));
            out.push((format!("head{h}.wk"), &head.wk));
            out.push((format!("head{h}.wv"), &head.wv));
        }
        out.extend([
            ("wo".to_string(), &self.wo),
            ("w1".to_string(), &self.w1),
            ("b1".to_string(), &self.b1),
            ("w2".to_string(), &self.w2),
            ("b2".to_string(), &self.b2),
            ("ln1.gain".to_string(), &self.ln1_gain),
            ("ln1.bias".to_string(), &self.ln1_bias),
            ("ln2.gain".to_string(), &self.ln2_gain),
            ("ln2.bias".to_string(), &self.ln2_bias),
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for head in &mut self.heads {
            out.extend([&mut head.wq, &mut head.wk, &mut head.wv]);
        }
        out.extend([
            &mut self.wo,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]);
        out
    }

    pub fn bind(&self, tape: &mut Tape) -> LayerVars {
        let heads = self
            .heads
            .iter()
            .map(|h| HeadVars {
                wq: tape.leaf(h.wq.clone()),
                wk: tape.leaf(h.wk.clone()),
                wv: tape.leaf(h.wv.clone()),
            })
            .collect();
        LayerVars {
            heads,
            wo: tape.leaf(self.wo.clone()),
            w1: tape.leaf(self.w1.clone()),
            b1: tape.leaf(self.b1.clone()),
            w2: tape.leaf(self.w2.clone()),
            b2: tape.leaf(self.b2.clone()),
            ln1_gain: tape.leaf(self.ln1_gain.clone()),
            ln1_bias: tape.leaf(self.ln1_bias.clone()),
            ln2_gain: tape.leaf(self.ln2_gain.clone()),
            ln2_bias: tape.leaf(self.ln2_bias.clone()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct HeadVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

/// [`LayerParams`] bound to tape leaves.
#[derive(Clone, Debug)]
pub struct LayerVars {
    pub heads: Vec<HeadVars>,
    pub wo: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

impl LayerVars {
    /// Leaves in the same order as [`LayerParams::named`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for h in &self.heads {
            out.extend([h.wq, h.wk, h.wv]);
        }
        out.extend([
            self.wo,
            self.w1,
            self.b1,
            self.w2,
            self.b2,
            self.ln1_gain,
            self.ln1_bias,
            self.ln2_gain,
            self.ln2_bias,
        ]);
        out
    }
}

/// Bottleneck tokens shared between modality streams, `B x d`.
#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckState {
    pub tokens: Tensor,
}

impl BottleneckState {
    pub fn init(count: usize, d: usize, rng: &mut Rng) -> Result<Self> {
        if count == 0 {
            return Err(Error::Config("at least one bottleneck token is required".into()));
        }
        Ok(Self {
            tokens: rng.rand_normal(&[count, d], 0.02),
        })
    }

    pub fn count(&self) -> usize {
        self.tokens.rows()
    }
}

/// Baseline fusion patterns that apply one key scope to every head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerPattern {
    /// Block diagonal: every token sees its own modality.
    SelfAttention,
    /// Off-diagonal blocks: every token sees all other modalities.
    Cross,
    /// No mask.
    Multi,
}

impl LayerPattern {
    pub fn scope(self) -> KeyScope {
        match self {
            LayerPattern::SelfAttention => KeyScope::Own,
            LayerPattern::Cross => KeyScope::Others,
            LayerPattern::Multi => KeyScope::All,
        }
    }
}

/// One head on the tape; returns `total x d_head`.
pub fn head_graph(tape: &mut Tape, x: Var, head: &HeadVars, scope: KeyScope, layout: &ModalityLayout) -> Result<Var> {
    let n = tape.value(x).rows();
    if n != layout.total() {
        return Err(Error::shape("attention head", tape.value(x).shape(), &[layout.total()]));
    }
    let q = tape.matmul(x, head.wq, MatmulKind::Projection)?;
    let k = tape.matmul(x, head.wk, MatmulKind::Projection)?;
    let v = tape.matmul(x, head.wv, MatmulKind::Projection)?;
    let d_head = tape.value(head.wv).cols();
    let scale = 1.0 / (tape.value(head.wq).cols() as f64).sqrt();

    let mut blocks = Vec::with_capacity(layout.modalities());
    for m in 0..layout.modalities() {
        let keys = scope.key_tokens(m, layout);
        if keys.is_empty() {
            blocks.push(tape.leaf(Tensor::zeros(&[layout.len(m), d_head])));
            continue;
        }
        let qm = tape.gather_rows(q, layout.range(m).collect())?;
        let km = tape.gather_rows(k, keys.clone())?;
        let vm = tape.gather_rows(v, keys)?;
        let scores = tape.matmul_bt(qm, km, MatmulKind::Score)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax_rows(scores);
        blocks.push(tape.matmul(weights, vm, MatmulKind::Value)?);
    }
    tape.concat_rows(&blocks)
}

/// Full pre-norm block with one key scope per head.
pub fn layer_graph(
    tape: &mut Tape,
    x: Var,
    layer: &LayerVars,
    scopes: &[KeyScope],
    layout: &ModalityLayout,
) -> Result<Var> {
    if scopes.len() != layer.heads.len() {
        return Err(Error::Frequency(format!(
            "{} head views for a layer with {} heads",
            scopes.len(),
            layer.heads.len()
        )));
    }
    let h = tape.layer_norm(x, layer.ln1_gain, layer.ln1_bias)?;
    let mut heads = Vec::with_capacity(scopes.len());
    for (head, &scope) in layer.heads.iter().zip(scopes) {
        heads.push(head_graph(tape, h, head, scope, layout)?);
    }
    let cat = tape.concat_cols(&heads)?;
    let attn = tape.matmul(cat, layer.wo, MatmulKind::Projection)?;
    let x = tape.add(x, attn)?;

    let h = tape.layer_norm(x, layer.ln2_gain, layer.ln2_bias)?;
    let h = tape.matmul(h, layer.w1, MatmulKind::FeedForward)?;
    let h = tape.add_row(h, layer.b1)?;
    let h = tape.gelu(h);
    let h = tape.matmul(h, layer.w2, MatmulKind::FeedForward)?;
    let h = tape.add_row(h, layer.b2)?;
    tape.add(x, h)
}

/// Bottleneck fusion on the tape: each modality block attends over itself
/// plus its own copy of the bottleneck tokens, then the copies are averaged.
/// Returns the updated packed sequence and bottleneck tokens.
pub fn bottleneck_graph(
    tape: &mut Tape,
    x: Var,
    bottleneck: Var,
    layer: &LayerVars,
    layout: &ModalityLayout,
) -> Result<(Var, Var)> {
    let b = tape.value(bottleneck).rows();
    let scopes = vec![KeyScope::Own; layer.heads.len()];
    let mut streams = Vec::with_capacity(layout.modalities());
    let mut copies = Vec::with_capacity(layout.modalities());
    for m in 0..layout.modalities() {
        let len = layout.len(m);
        let xm = tape.gather_rows(x, layout.range(m).collect())?;
        let seq = tape.concat_rows(&[xm, bottleneck])?;
        let local = ModalityLayout::new(vec![len + b])?;
        let out = layer_graph(tape, seq, layer, &scopes, &local)?;
        streams.push(tape.slice_rows(out, 0, len)?);
        copies.push(tape.slice_rows(out, len, b)?);
    }
    let x = tape.concat_rows(&streams)?;
    let bottleneck = tape.average(&copies)?;
    Ok((x, bottleneck))
}

fn absorb(counter: &FlopCounter, tape: &Tape) {
    let snap = tape.flops().snapshot();
    for kind in MatmulKind::ALL {
        counter.record(kind, snap.get(kind));
    }
}

/// One head of view-restricted attention.
pub fn restricted_attention_head(
    x: &Tensor,
    head: &HeadParams,
    view: AttentionView,
    layout: &ModalityLayout,
) -> Result<Tensor> {
    view.validate(layout.modalities())?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let hv = HeadVars {
        wq: tape.leaf(head.wq.clone()),
        wk: tape.leaf(head.wk.clone()),
        wv: tape.leaf(head.wv.clone()),
    };
    let out = head_graph(&mut tape, xv, &hv, view.scope(), layout)?;
    Ok(tape.value(out).clone())
}

/// Dense `total x total` attention weights of one head (zeros outside the
/// head's scope), for inspection.
pub fn attention_weights(x: &Tensor, head: &HeadParams, scope: KeyScope, layout: &ModalityLayout) -> Result<Tensor> {
    let q = crate::numerics::matmul(x, &head.wq)?;
    let k = crate::numerics::matmul(x, &head.wk)?;
    let scale = 1.0 / (head.d_head() as f64).sqrt();
    let mut out = Tensor::zeros(&[layout.total(), layout.total()]);
    for m in 0..layout.modalities() {
        let keys = scope.key_tokens(m, layout);
        if keys.is_empty() {
            continue;
        }
        let qm = q.gather_rows(&layout.range(m).collect::<Vec<_>>())?;
        let km = k.gather_rows(&keys)?;
        let w = crate::numerics::softmax_rows_dense(&crate::numerics::matmul_bt(&qm, &km)?.scale(scale));
        for (r, qi) in layout.range(m).enumerate() {
            for (c, &ki) in keys.iter().enumerate() {
                out.set(qi, ki, w.get(r, c));
            }
        }
    }
    Ok(out)
}

/// Layer with an explicit key scope per head.
pub fn scoped_layer(
    x: &Tensor,
    params: &LayerParams,
    scopes: &[KeyScope],
    layout: &ModalityLayout,
    flops: &FlopCounter,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let lv = params.bind(&mut tape);
    let out = layer_graph(&mut tape, xv, &lv, scopes, layout)?;
    absorb(flops, &tape);
    Ok(tape.value(out).clone())
}

/// LoCoMT layer: each head attends under its assigned view.
pub fn locomt_layer(
    x: &Tensor,
    params: &LayerParams,
    assignment: &ViewAssignment,
    layout: &ModalityLayout,
    flops: &FlopCounter,
) -> Result<Tensor> {
    if assignment.n_heads() != params.n_heads() {
        return Err(Error::Frequency(format!(
            "assignment has {} heads, layer has {}",
            assignment.n_heads(),
            params.n_heads()
        )));
    }
    assignment.validate(layout.modalities())?;
    let scopes: Vec<KeyScope> = assignment.views().iter().map(|v| v.scope()).collect();
    scoped_layer(x, params, &scopes, layout, flops)
}

/// Self, cross or multimodal fusion layer.
pub fn pattern_layer(
    x: &Tensor,
    params: &LayerParams,
    pattern: LayerPattern,
    layout: &ModalityLayout,
    flops: &FlopCounter,
) -> Result<Tensor> {
    let scopes = vec![pattern.scope(); params.n_heads()];
    scoped_layer(x, params, &scopes, layout, flops)
}

/// Bottleneck fusion over per-modality streams.
pub fn bottleneck_layer(
    streams: &[Tensor],
    bottleneck: &BottleneckState,
    params: &LayerParams,
    flops: &FlopCounter,
) -> Result<(Vec<Tensor>, BottleneckState)> {
    if streams.is_empty() {
        return Err(Error::Layout("bottleneck fusion needs at least one stream".into()));
    }
    let layout = ModalityLayout::new(streams.iter().map(|s| s.rows()).collect())?;
    let mut tape = Tape::new();
    let parts: Vec<&Tensor> = streams.iter().collect();
    let xv = tape.leaf(Tensor::concat_rows(&parts)?);
    let bv = tape.leaf(bottleneck.tokens.clone());
    let lv = params.bind(&mut tape);
    let (x, b) = bottleneck_graph(&mut tape, xv, bv, &lv, &layout)?;
    absorb(flops, &tape);
    let packed = tape.value(x);
    let outs = (0..layout.modalities())
        .map(|m| packed.slice_rows(layout.offsets()[m], layout.len(m)))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        outs,
        BottleneckState {
            tokens: tape.value(b).clone(),
        },
    ))
}

/// Masks for the bottleneck pattern drawn over `[tokens..., bottleneck...]`.
/// Cells are `(allowed, involves_bottleneck)`.
pub fn bottleneck_mask(layout: &ModalityLayout, b: usize) -> (Mask, Mask) {
    let n = layout.total();
    let owner = |t: usize| {
        if t < n {
            Some(layout.modality_of(t).unwrap())
        } else {
            None
        }
    };
    let allowed = Mask::from_fn(n + b, n + b, |r, c| match (owner(r), owner(c)) {
        (Some(a), Some(k)) => a == k,
        _ => true,
    });
    let marked = Mask::from_fn(n + b, n + b, |r, c| r >= n || c >= n);
    (allowed, marked)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(l: &[usize]) -> ModalityLayout {
        ModalityLayout::new(l.to_vec()).unwrap()
    }

    #[test]
    fn constant_values_pass_through() {
        let mut rng = Rng::new(1);
        let l = layout(&[3, 2]);
        let x = rng.rand_normal(&[5, 4], 1.0);
        let mut head = HeadParams {
            wq: rng.rand_normal(&[4, 2], 1.0),
            wk: rng.rand_normal(&[4, 2], 1.0),
            wv: Tensor::zeros(&[4, 2]),
        };
        // x @ wv is constant across rows when wv only reads a constant column.
        let x = {
            let mut x = x;
            for r in 0..5 {
                x.set(r, 0, 1.0);
            }
            x
        };
        head.wv.set(0, 0, 2.0);
        head.wv.set(0, 1, -1.0);
        for view in [AttentionView::SelfView, AttentionView::Cross(0, 1)] {
            let out = restricted_attention_head(&x, &head, view, &l).unwrap();
            for r in 0..5 {
                assert!((out.get(r, 0) - 2.0).abs() < 1e-12);
                assert!((out.get(r, 1) + 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_scope_rows_are_zero() {
        let mut rng = Rng::new(2);
        let l = layout(&[2, 2, 3]);
        let x = rng.rand_normal(&[7, 4], 1.0);
        let head = HeadParams {
            wq: rng.rand_normal(&[4, 2], 1.0),
            wk: rng.rand_normal(&[4, 2], 1.0),
            wv: rng.rand_normal(&[4, 2], 1.0),
        };
        let out = restricted_attention_head(&x, &head, AttentionView::Cross(0, 1), &l).unwrap();
        for r in 4..7 {
            assert_eq!(out.row(r), &[0.0, 0.0]);
        }
        assert!(out.row(0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn weights_rows_sum_to_one_and_respect_scope() {
        let mut rng = Rng::new(3);
        let l = layout(&[3, 4]);
        let x = rng.rand_normal(&[7, 4], 1.0);
        let head = HeadParams {
            wq: rng.rand_normal(&[4, 2], 1.0),
            wk: rng.rand_normal(&[4, 2], 1.0),
            wv: rng.rand_normal(&[4, 2], 1.0),
        };
        let scope = KeyScope::Pair(0, 1);
        let w = attention_weights(&x, &head, scope, &l).unwrap();
        let mask = scope.mask(&l);
        for r in 0..7 {
            let s: f64 = w.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            for c in 0..7 {
                if !mask.get(r, c) {
                    assert_eq!(w.get(r, c).to_bits(), 0.0f64.to_bits());
                }
            }
        }
    }

    #[test]
    fn mismatched_heads_are_rejected() {
        let mut rng = Rng::new(4);
        let params = LayerParams::init(4, 2, 16, 0.1, &mut rng).unwrap();
        let x = rng.rand_normal(&[3, 4], 1.0);
        let err = locomt_layer(
            &x,
            &params,
            &ViewAssignment::all_self(1),
            &layout(&[3]),
            &FlopCounter::new(),
        );
        assert!(matches!(err, Err(Error::Frequency(_))));
    }

    #[test]
    fn zero_input_stays_finite() {
        let mut rng = Rng::new(5);
        let params = LayerParams::init(4, 2, 16, 0.1, &mut rng).unwrap();
        let out = pattern_layer(
            &Tensor::zeros(&[5, 4]),
            &params,
            LayerPattern::Multi,
            &layout(&[2, 3]),
            &FlopCounter::new(),
        )
        .unwrap();
        assert!(out.all_finite());
        // Zero biases and zero input: LN gives zeros, so every branch is zero.
        assert_eq!(out.max_abs(), 0.0);
    }

    #[test]
    fn bottleneck_mask_shape() {
        let (allowed, marked) = bottleneck_mask(&layout(&[2, 2]), 1);
        assert_eq!(allowed.rows(), 5);
        assert!(allowed.get(0, 1) && !allowed.get(0, 2) && allowed.get(0, 4) && allowed.get(4, 2));
        assert!(marked.get(4, 0) && marked.get(1, 4) && !marked.get(1, 1));
    }
}
