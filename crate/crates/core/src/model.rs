//! Toy multimodal classifier: per-modality embeddings with a CLS token,
//! `layers - fusion_layers` unimodal layers, `fusion_layers` fusion layers and
//! a linear head over the mean of the CLS outputs.

use std::fmt;
use std::str::FromStr;

use crate::attention::{bottleneck_graph, layer_graph, LayerParams, LayerPattern, LayerVars};
use crate::error::{Error, Result};
use crate::numerics::{FlopBreakdown, Mask, MatmulKind, Rng, Tensor};
use crate::tape::{Tape, Var};
use crate::viewconfig::{KeyScope, LayerPlan, ModalityLayout};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionPattern {
    LoCoMT,
    SelfAttention,
    Cross,
    Multi,
    Bottleneck,
}

impl FusionPattern {
    pub const ALL: [FusionPattern; 5] = [
        FusionPattern::LoCoMT,
        FusionPattern::SelfAttention,
        FusionPattern::Cross,
        FusionPattern::Multi,
        FusionPattern::Bottleneck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionPattern::LoCoMT => "locomt",
            FusionPattern::SelfAttention => "self",
            FusionPattern::Cross => "cross",
            FusionPattern::Multi => "multi",
            FusionPattern::Bottleneck => "bottleneck",
        }
    }
}

impl fmt::Display for FusionPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionPattern::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion pattern `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Raw token count per modality, excluding the CLS token.
    pub lengths: Vec<usize>,
    pub feature_dims: Vec<usize>,
    pub d: usize,
    pub n_heads: usize,
    pub layers: usize,
    pub fusion_layers: usize,
    pub d_ff: usize,
    pub num_classes: usize,
    pub pattern: FusionPattern,
    /// Required for [`FusionPattern::LoCoMT`]; ignored otherwise.
    pub plan: Option<LayerPlan>,
    pub bottleneck_tokens: usize,
}

impl ModelConfig {
    pub fn modalities(&self) -> usize {
        self.lengths.len()
    }

    pub fn d_head(&self) -> usize {
        self.d / self.n_heads
    }

    /// Layout of the packed sequence, CLS tokens included.
    pub fn packed_layout(&self) -> ModalityLayout {
        ModalityLayout::new(self.lengths.iter().map(|l| l + 1).collect()).expect("validated lengths are positive")
    }

    /// Index among fusion layers, if `layer` is one.
    pub fn fusion_index(&self, layer: usize) -> Option<usize> {
        let first = self.layers - self.fusion_layers;
        (layer >= first).then(|| layer - first)
    }

    /// Key scope of every head in fusion layer `f`.
    pub fn fusion_scopes(&self, f: usize) -> Vec<KeyScope> {
        let uniform = |p: LayerPattern| vec![p.scope(); self.n_heads];
        match self.pattern {
            FusionPattern::LoCoMT => self
                .plan
                .as_ref()
                .expect("validated locomt config has a plan")
                .fusion(f)
                .views()
                .iter()
                .map(|v| v.scope())
                .collect(),
            FusionPattern::SelfAttention | FusionPattern::Bottleneck => uniform(LayerPattern::SelfAttention),
            FusionPattern::Cross => uniform(LayerPattern::Cross),
            FusionPattern::Multi => uniform(LayerPattern::Multi),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let m = self.modalities();
        if m == 0 {
            return bad("at least one modality is required".into());
        }
        if self.feature_dims.len() != m {
            return bad(format!("{m} modalities but {} feature dims", self.feature_dims.len()));
        }
        if self.lengths.contains(&0) || self.feature_dims.contains(&0) {
            return bad("lengths and feature dims must be positive".into());
        }
        if self.d == 0 || self.n_heads == 0 || !self.d.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d = {} must be a positive multiple of n_heads = {}",
                self.d, self.n_heads
            ));
        }
        if self.d_ff == 0 || self.num_classes == 0 {
            return bad("d_ff and num_classes must be positive".into());
        }
        if self.fusion_layers > self.layers {
            return bad(format!(
                "{} fusion layers exceed {} layers",
                self.fusion_layers, self.layers
            ));
        }
        match self.pattern {
            FusionPattern::LoCoMT => {
                let Some(plan) = &self.plan else {
                    return bad("the locomt pattern needs a layer plan".into());
                };
                if plan.fusion_layers() != self.fusion_layers || plan.total_layers() != self.layers {
                    return bad(format!(
                        "plan covers {} of {} layers, config has {} of {}",
                        plan.fusion_layers(),
                        plan.total_layers(),
                        self.fusion_layers,
                        self.layers
                    ));
                }
                for a in plan.assignments() {
                    if a.n_heads() != self.n_heads {
                        return bad(format!(
                            "plan assigns {} heads, model has {}",
                            a.n_heads(),
                            self.n_heads
                        ));
                    }
                    a.validate(m)?;
                }
            }
            FusionPattern::Bottleneck if self.fusion_layers > 0 => {
                if self.bottleneck_tokens == 0 {
                    return bad("bottleneck fusion needs at least one token".into());
                }
                if m < 2 {
                    return bad("bottleneck fusion needs at least two modalities".into());
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn uses_bottleneck(&self) -> bool {
        self.pattern == FusionPattern::Bottleneck && self.bottleneck_tokens > 0
    }

    /// Per-head masks of every layer over the packed layout. Bottleneck fusion
    /// layers report the mask of one modality stream plus its bottleneck copy.
    pub fn layer_masks(&self) -> Vec<Vec<Mask>> {
        let layout = self.packed_layout();
        (0..self.layers)
            .map(|layer| match self.fusion_index(layer) {
                None => vec![KeyScope::Own.mask(&layout); self.n_heads],
                Some(_) if self.pattern == FusionPattern::Bottleneck => {
                    vec![crate::attention::bottleneck_mask(&layout, self.bottleneck_tokens).0; self.n_heads]
                }
                Some(f) => self.fusion_scopes(f).into_iter().map(|s| s.mask(&layout)).collect(),
            })
            .collect()
    }
}

/// Embedding weights of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    /// `feature_dim x d`
    pub w: Tensor,
    pub b: Tensor,
    /// `1 x d`
    pub cls: Tensor,
    /// `(len + 1) x d`, CLS position first.
    pub pos: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub embeddings: Vec<Embedding>,
    pub layers: Vec<LayerParams>,
    pub bottleneck: Option<Tensor>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
    /// `d x num_classes`
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, std: f64, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let embeddings = config
            .lengths
            .iter()
            .zip(&config.feature_dims)
            .map(|(&len, &feat)| Embedding {
                w: rng.rand_normal(&[feat, d], std),
                b: Tensor::zeros(&[d]),
                cls: rng.rand_normal(&[1, d], std),
                pos: rng.rand_normal(&[len + 1, d], std),
            })
            .collect();
        let layers = (0..config.layers)
            .map(|_| LayerParams::init(d, config.n_heads, config.d_ff, std, rng))
            .collect::<Result<_>>()?;
        let bottleneck = config
            .uses_bottleneck()
            .then(|| rng.rand_normal(&[config.bottleneck_tokens, d], std));
        Ok(Self {
            embeddings,
            layers,
            bottleneck,
            final_gain: Tensor::full(&[d], 1.0),
            final_bias: Tensor::zeros(&[d]),
            head_w: rng.rand_normal(&[d, config.num_classes], std),
            head_b: Tensor::zeros(&[config.num_classes]),
        })
    }

    /// Every parameter tensor with a stable name, in binding order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (k, e) in self.embeddings.iter().enumerate() {
            out.push((format!("embed{k}.w"), &e.w));
            out.push((format!("embed{k}.b"), &e.b));
            out.push((format!("embed{k}.cls"), &e.cls));
            out.push((format!("embed{k}.pos"), &e.pos));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.named().into_iter().map(|(n, t)| (format!("layer{l}.{n}"), t)));
        }
        if let Some(b) = &self.bottleneck {
            out.push(("bottleneck".into(), b));
        }
        out.push(("final.gain".into(), &self.final_gain));
        out.push(("final.bias".into(), &self.final_bias));
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    /// Mutable tensors in the order of [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for e in &mut self.embeddings {
            out.extend([&mut e.w, &mut e.b, &mut e.cls, &mut e.pos]);
        }
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        if let Some(b) = &mut self.bottleneck {
            out.push(b);
        }
        out.extend([
            &mut self.final_gain,
            &mut self.final_bias,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        out
    }

    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        let embeddings = self
            .embeddings
            .iter()
            .map(|e| EmbeddingVars {
                w: tape.leaf(e.w.clone()),
                b: tape.leaf(e.b.clone()),
                cls: tape.leaf(e.cls.clone()),
                pos: tape.leaf(e.pos.clone()),
            })
            .collect();
        let layers = self.layers.iter().map(|l| l.bind(tape)).collect();
        let bottleneck = self.bottleneck.as_ref().map(|b| tape.leaf(b.clone()));
        ModelVars {
            embeddings,
            layers,
            bottleneck,
            final_gain: tape.leaf(self.final_gain.clone()),
            final_bias: tape.leaf(self.final_bias.clone()),
            head_w: tape.leaf(self.head_w.clone()),
            head_b: tape.leaf(self.head_b.clone()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EmbeddingVars {
    pub w: Var,
    pub b: Var,
    pub cls: Var,
    pub pos: Var,
}

/// [`ModelParams`] bound to tape leaves.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub embeddings: Vec<EmbeddingVars>,
    pub layers: Vec<LayerVars>,
    pub bottleneck: Option<Var>,
    pub final_gain: Var,
    pub final_bias: Var,
    pub head_w: Var,
    pub head_b: Var,
}

impl ModelVars {
    /// Leaves in the order of [`ModelParams::named`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for e in &self.embeddings {
            out.extend([e.w, e.b, e.cls, e.pos]);
        }
        for l in &self.layers {
            out.extend(l.vars());
        }
        out.extend(self.bottleneck);
        out.extend([self.final_gain, self.final_bias, self.head_w, self.head_b]);
        out
    }
}

/// Parameter census from the config alone.
pub fn count_params(config: &ModelConfig) -> usize {
    let d = config.d;
    let embed: usize = config
        .lengths
        .iter()
        .zip(&config.feature_dims)
        .map(|(&len, &feat)| feat * d + d + d + (len + 1) * d)
        .sum();
    let layer = 3 * d * d + d * d + 2 * d * config.d_ff + config.d_ff + d + 4 * d;
    let bottleneck = if config.uses_bottleneck() {
        config.bottleneck_tokens * d
    } else {
        0
    };
    embed + config.layers * layer + bottleneck + 2 * d + d * config.num_classes + config.num_classes
}

/// One labelled example: a `len_k x feature_dim_k` matrix per modality.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub modalities: Vec<Tensor>,
    pub label: usize,
}

fn check_sample(config: &ModelConfig, sample: &Sample) -> Result<()> {
    if sample.modalities.len() != config.modalities() {
        return Err(Error::Config(format!(
            "sample has {} modalities, model expects {}",
            sample.modalities.len(),
            config.modalities()
        )));
    }
    for (k, x) in sample.modalities.iter().enumerate() {
        let expect = [config.lengths[k], config.feature_dims[k]];
        if x.rows() != expect[0] || x.cols() != expect[1] {
            return Err(Error::shape("embed", x.shape(), &expect));
        }
    }
    Ok(())
}

/// Packed `(sum len_k + m) x d` input sequence on the tape.
pub fn embed_graph(tape: &mut Tape, config: &ModelConfig, vars: &ModelVars, sample: &Sample) -> Result<Var> {
    check_sample(config, sample)?;
    let mut blocks = Vec::with_capacity(config.modalities());
    for (x, e) in sample.modalities.iter().zip(&vars.embeddings) {
        let xv = tape.leaf(x.clone());
        let proj = tape.matmul(xv, e.w, MatmulKind::Embed)?;
        let proj = tape.add_row(proj, e.b)?;
        let seq = tape.concat_rows(&[e.cls, proj])?;
        blocks.push(tape.add(seq, e.pos)?);
    }
    tape.concat_rows(&blocks)
}

/// Outputs of the whole stack before readout: final-normed packed sequence.
pub fn encode_graph(tape: &mut Tape, config: &ModelConfig, vars: &ModelVars, sample: &Sample) -> Result<Var> {
    let layout = config.packed_layout();
    let mut x = embed_graph(tape, config, vars, sample)?;
    let mut bottleneck = vars.bottleneck;
    for (layer, lv) in vars.layers.iter().enumerate() {
        x = match config.fusion_index(layer) {
            None => layer_graph(tape, x, lv, &vec![KeyScope::Own; config.n_heads], &layout)?,
            Some(_) if config.pattern == FusionPattern::Bottleneck => {
                let b = bottleneck.expect("bottleneck tokens are bound for the bottleneck pattern");
                let (nx, nb) = bottleneck_graph(tape, x, b, lv, &layout)?;
                bottleneck = Some(nb);
                nx
            }
            Some(f) => layer_graph(tape, x, lv, &config.fusion_scopes(f), &layout)?,
        };
    }
    tape.layer_norm(x, vars.final_gain, vars.final_bias)
}

/// CLS rows of the encoded sequence, `m x d`.
pub fn cls_graph(tape: &mut Tape, config: &ModelConfig, vars: &ModelVars, sample: &Sample) -> Result<Var> {
    let encoded = encode_graph(tape, config, vars, sample)?;
    let layout = config.packed_layout();
    let cls_rows = layout.offsets()[..layout.modalities()].to_vec();
    tape.gather_rows(encoded, cls_rows)
}

/// `1 x num_classes` logits of one sample.
pub fn logits_graph(tape: &mut Tape, config: &ModelConfig, vars: &ModelVars, sample: &Sample) -> Result<Var> {
    let cls = cls_graph(tape, config, vars, sample)?;
    let pooled = tape.mean_rows(cls);
    let logits = tape.matmul(pooled, vars.head_w, MatmulKind::Head)?;
    tape.add_row(logits, vars.head_b)
}

/// Packed embedding of one sample.
pub fn embed(config: &ModelConfig, params: &ModelParams, sample: &Sample) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let x = embed_graph(&mut tape, config, &vars, sample)?;
    Ok(tape.value(x).clone())
}

/// Final CLS representation of each modality, `m x d`.
pub fn cls_outputs(config: &ModelConfig, params: &ModelParams, sample: &Sample) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let cls = cls_graph(&mut tape, config, &vars, sample)?;
    Ok(tape.value(cls).clone())
}

#[derive(Clone, Debug)]
pub struct ClassifierOutput {
    /// `batch x num_classes`
    pub logits: Tensor,
    /// FLOPs of the whole batch.
    pub flops: FlopBreakdown,
    /// Per layer, per head masks over the packed layout.
    pub masks: Option<Vec<Vec<Mask>>>,
}

impl ClassifierOutput {
    pub fn predictions(&self) -> Vec<usize> {
        (0..self.logits.rows())
            .map(|r| {
                let row = self.logits.row(r);
                (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best })
            })
            .collect()
    }
}

pub fn forward(config: &ModelConfig, params: &ModelParams, batch: &[Sample]) -> Result<ClassifierOutput> {
    config.validate()?;
    let mut rows = Vec::with_capacity(batch.len());
    let mut flops = FlopBreakdown::default();
    for sample in batch {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let logits = logits_graph(&mut tape, config, &vars, sample)?;
        rows.push(tape.value(logits).clone());
        flops.merge(&tape.flops().snapshot());
    }
    let parts: Vec<&Tensor> = rows.iter().collect();
    Ok(ClassifierOutput {
        logits: Tensor::concat_rows(&parts)?,
        flops,
        masks: None,
    })
}

/// [`forward`] that also returns every layer's masks.
pub fn forward_with_masks(config: &ModelConfig, params: &ModelParams, batch: &[Sample]) -> Result<ClassifierOutput> {
    let mut out = forward(config, params, batch)?;
    out.masks = Some(config.layer_masks());
    Ok(out)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"LOCOMTCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Serializes every named tensor. Layout (all little-endian): magic
/// `LOCOMTCK`, `u32` version, `u32` tensor count, then per tensor a `u32`
/// name length, UTF-8 name, `u32` rank, `u64` per dimension and the `f64`
/// data in row-major order.
pub fn save_checkpoint(params: &ModelParams) -> Vec<u8> {
    let named = params.named();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &dim in t.shape() {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| Error::Format {
            what: "checkpoint",
            detail: "unexpected end of data".into(),
        })?;
        self.pos = end;
        Ok(chunk)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Restores parameters for `config` from [`save_checkpoint`] bytes. Names and
/// shapes must match exactly.
pub fn load_checkpoint(config: &ModelConfig, bytes: &[u8]) -> Result<ModelParams> {
    let fail = |detail: String| Error::Format {
        what: "checkpoint",
        detail,
    };
    let mut params = ModelParams::init(config, 0.0, &mut Rng::new(0))?;
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(fail("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let count = r.u32()? as usize;
    if count != names.len() {
        return Err(fail(format!("{count} tensors, config expects {}", names.len())));
    }
    for (expect, slot) in names.iter().zip(params.tensors_mut()) {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|e| fail(e.to_string()))?;
        if name != expect {
            return Err(fail(format!("expected tensor `{expect}`, found `{name}`")));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape != slot.shape() {
            return Err(fail(format!(
                "`{name}` has shape {shape:?}, expected {:?}",
                slot.shape()
            )));
        }
        for v in slot.data_mut() {
            *v = r.f64()?;
        }
    }
    if r.pos != bytes.len() {
        return Err(fail("trailing bytes".into()));
    }
    Ok(params)
}
