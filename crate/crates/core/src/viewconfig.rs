//! Modality layouts, attention views and per-layer head assignments.
//!
//! Modalities are indexed from 0 in the API. Text output (`Display`) uses
//! 1-based indices, so `AttentionView::Cross(0, 1)` prints as `cross(1,2)`.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{Mask, Rng};

/// Token counts of the modalities packed back to back in one sequence.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ModalityLayout {
    lengths: Vec<usize>,
    offsets: Vec<usize>,
}

impl ModalityLayout {
    pub fn new(lengths: Vec<usize>) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::Layout("at least one modality is required".into()));
        }
        if let Some(k) = lengths.iter().position(|&l| l == 0) {
            return Err(Error::Layout(format!("modality {} has zero tokens", k + 1)));
        }
        let mut offsets = Vec::with_capacity(lengths.len() + 1);
        offsets.push(0);
        for l in &lengths {
            offsets.push(offsets.last().unwrap() + l);
        }
        Ok(Self { lengths, offsets })
    }

    pub fn modalities(&self) -> usize {
        self.lengths.len()
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn len(&self, k: usize) -> usize {
        self.lengths[k]
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn range(&self, k: usize) -> Range<usize> {
        self.offsets[k]..self.offsets[k + 1]
    }

    pub fn modality_of(&self, token: usize) -> Result<usize> {
        if token >= self.total() {
            return Err(Error::Index {
                index: token,
                len: self.total(),
            });
        }
        Ok(self.offsets.partition_point(|&o| o <= token) - 1)
    }

    /// The same layout with `extra` tokens added to every modality.
    pub fn grown(&self, extra: usize) -> ModalityLayout {
        ModalityLayout::new(self.lengths.iter().map(|l| l + extra).collect())
            .expect("growing a valid layout keeps it valid")
    }
}

/// One element of the view set: self-attention, or cross-attention between a
/// modality pair `(i, j)` with `i < j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttentionView {
    SelfView,
    Cross(usize, usize),
}

impl AttentionView {
    /// Canonical cross view for an unordered pair.
    pub fn cross(a: usize, b: usize) -> Result<Self> {
        if a == b {
            return Err(Error::Frequency(format!(
                "cross view needs two distinct modalities, got {} twice",
                a + 1
            )));
        }
        Ok(AttentionView::Cross(a.min(b), a.max(b)))
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        match *self {
            AttentionView::SelfView => Ok(()),
            AttentionView::Cross(i, j) if i < j && j < m => Ok(()),
            AttentionView::Cross(i, j) => Err(Error::Frequency(format!(
                "cross({},{}) is not a valid view for {m} modalities",
                i + 1,
                j + 1
            ))),
        }
    }

    pub fn scope(self) -> KeyScope {
        match self {
            AttentionView::SelfView => KeyScope::Own,
            AttentionView::Cross(i, j) => KeyScope::Pair(i, j),
        }
    }
}

impl fmt::Display for AttentionView {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttentionView::SelfView => write!(f, "self"),
            AttentionView::Cross(i, j) => write!(f, "cross({},{})", i + 1, j + 1),
        }
    }
}

/// Key-selection rule for one head. Views map onto `Own` and `Pair`; the
/// baseline patterns add `Others` (every other modality) and `All`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KeyScope {
    Own,
    Pair(usize, usize),
    Others,
    All,
}

impl KeyScope {
    /// Key modalities visible to a query of modality `q` among `m`.
    pub fn key_modalities(self, q: usize, m: usize) -> Vec<usize> {
        match self {
            KeyScope::Own => vec![q],
            KeyScope::Pair(i, j) if q == i => vec![j],
            KeyScope::Pair(i, j) if q == j => vec![i],
            KeyScope::Pair(..) => Vec::new(),
            KeyScope::Others => (0..m).filter(|&k| k != q).collect(),
            KeyScope::All => (0..m).collect(),
        }
    }

    /// Token indices visible to a query of modality `q`.
    pub fn key_tokens(self, q: usize, layout: &ModalityLayout) -> Vec<usize> {
        self.key_modalities(q, layout.modalities())
            .into_iter()
            .flat_map(|k| layout.range(k))
            .collect()
    }

    pub fn mask(self, layout: &ModalityLayout) -> Mask {
        let m = layout.modalities();
        let n = layout.total();
        let owner: Vec<usize> = (0..n).map(|t| layout.modality_of(t).unwrap()).collect();
        let visible: Vec<Vec<usize>> = (0..m).map(|q| self.key_modalities(q, m)).collect();
        Mask::from_fn(n, n, |r, c| visible[owner[r]].contains(&owner[c]))
    }
}

/// The full view set for `m` modalities: self first, then every pair in
/// lexicographic order. Length is `m(m-1)/2 + 1`.
pub fn enumerate_views(m: usize) -> Vec<AttentionView> {
    let mut views = vec![AttentionView::SelfView];
    for i in 0..m {
        for j in i + 1..m {
            views.push(AttentionView::Cross(i, j));
        }
    }
    views
}

/// Keys query `q` may attend to under `view`.
pub fn allowed_keys(view: AttentionView, layout: &ModalityLayout, q: usize) -> Result<Vec<usize>> {
    let k = layout.modality_of(q)?;
    view.validate(layout.modalities())?;
    Ok(view.scope().key_tokens(k, layout))
}

/// Per-head view choice for one layer, kept sorted (self heads first, then
/// cross heads in pair order).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ViewAssignment {
    views: Vec<AttentionView>,
}

impl ViewAssignment {
    pub fn new(mut views: Vec<AttentionView>) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::Frequency("an assignment needs at least one head".into()));
        }
        views.sort();
        Ok(Self { views })
    }

    pub fn all_self(n_heads: usize) -> Self {
        Self {
            views: vec![AttentionView::SelfView; n_heads],
        }
    }

    /// Builds an assignment from a view frequency `f`, one count per element
    /// of [`enumerate_views`].
    pub fn from_frequencies(m: usize, freqs: &[usize]) -> Result<Self> {
        let views = enumerate_views(m);
        if freqs.len() != views.len() {
            return Err(Error::Frequency(format!(
                "{m} modalities need {} frequencies, got {}",
                views.len(),
                freqs.len()
            )));
        }
        let heads: Vec<AttentionView> = views
            .iter()
            .zip(freqs)
            .flat_map(|(&v, &n)| std::iter::repeat_n(v, n))
            .collect();
        Self::new(heads)
    }

    pub fn views(&self) -> &[AttentionView] {
        &self.views
    }

    pub fn n_heads(&self) -> usize {
        self.views.len()
    }

    pub fn self_heads(&self) -> usize {
        self.count(AttentionView::SelfView)
    }

    pub fn count(&self, view: AttentionView) -> usize {
        self.views.iter().filter(|&&v| v == view).count()
    }

    /// Head counts per element of [`enumerate_views`]`(m)`.
    pub fn frequencies(&self, m: usize) -> Vec<usize> {
        enumerate_views(m).into_iter().map(|v| self.count(v)).collect()
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        self.views.iter().try_for_each(|v| v.validate(m))
    }
}

/// Boolean mask per head; entry `[q][k]` is set iff key `k` is visible to `q`.
pub fn mask_grid(assignment: &ViewAssignment, layout: &ModalityLayout) -> Result<Vec<Mask>> {
    assignment.validate(layout.modalities())?;
    Ok(assignment.views().iter().map(|v| v.scope().mask(layout)).collect())
}

/// Head assignments for the whole stack. The first `total_layers -
/// fusion_layers` layers are unimodal (all heads self); `assignments` covers
/// the fusion layers on top.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerPlan {
    total_layers: usize,
    assignments: Vec<ViewAssignment>,
}

impl LayerPlan {
    pub fn new(total_layers: usize, assignments: Vec<ViewAssignment>) -> Result<Self> {
        if assignments.len() > total_layers {
            return Err(Error::Frequency(format!(
                "{} fusion assignments for a {total_layers}-layer model",
                assignments.len()
            )));
        }
        if let Some(first) = assignments.first() {
            let n = first.n_heads();
            if let Some(bad) = assignments.iter().find(|a| a.n_heads() != n) {
                return Err(Error::Frequency(format!(
                    "fusion layers disagree on head count ({n} vs {})",
                    bad.n_heads()
                )));
            }
        }
        Ok(Self {
            total_layers,
            assignments,
        })
    }

    pub fn uniform(total_layers: usize, fusion_layers: usize, assignment: ViewAssignment) -> Result<Self> {
        Self::new(total_layers, vec![assignment; fusion_layers])
    }

    pub fn total_layers(&self) -> usize {
        self.total_layers
    }

    pub fn fusion_layers(&self) -> usize {
        self.assignments.len()
    }

    pub fn unimodal_layers(&self) -> usize {
        self.total_layers - self.assignments.len()
    }

    pub fn assignments(&self) -> &[ViewAssignment] {
        &self.assignments
    }

    /// Assignment for fusion layer `index` (0-based among fusion layers).
    pub fn fusion(&self, index: usize) -> &ViewAssignment {
        &self.assignments[index]
    }
}

/// Layer-wise allocation schedules for two-modality fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    Spread,
    Bottleneck,
    Alternating,
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Spread,
        Strategy::Bottleneck,
        Strategy::Alternating,
        Strategy::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Spread => "spread",
            Strategy::Bottleneck => "bottleneck",
            Strategy::Alternating => "alternating",
            Strategy::Random => "random",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Unsupported(format!("unknown strategy `{s}`")))
    }
}

/// Self-head count `p_0` for each fusion layer under `kind`.
///
/// The step is `floor(n_heads / fusion_layers)`. Spread and bottleneck both
/// start at `n_heads - step`; bottleneck descends through the first
/// `ceil(fusion_layers / 2)` layers and then mirrors back up.
pub fn strategy_self_heads(kind: Strategy, n_heads: usize, fusion_layers: usize, rng: &mut Rng) -> Vec<usize> {
    let step = n_heads / fusion_layers.max(1);
    let descending = |layer: usize| n_heads.saturating_sub(layer * step);
    match kind {
        Strategy::Spread => (1..=fusion_layers).map(descending).collect(),
        Strategy::Bottleneck => {
            let turn = fusion_layers.div_ceil(2);
            (1..=fusion_layers)
                .map(|l| {
                    if l <= turn {
                        descending(l)
                    } else {
                        descending(fusion_layers + 1 - l)
                    }
                })
                .collect()
        }
        Strategy::Alternating => (1..=fusion_layers)
            .map(|l| if l % 2 == 1 { n_heads } else { 0 })
            .collect(),
        Strategy::Random => (0..fusion_layers)
            .map(|_| rng.uniform_int(0, n_heads as i64) as usize)
            .collect(),
    }
}

/// Per-layer assignments for a two-modality strategy; the non-self heads all
/// carry `cross(1,2)`.
pub fn make_strategy(
    kind: Strategy,
    n_heads: usize,
    fusion_layers: usize,
    m: usize,
    rng: &mut Rng,
) -> Result<Vec<ViewAssignment>> {
    if m != 2 {
        return Err(Error::Unsupported(format!(
            "the {kind} strategy is defined for two modalities, got {m}"
        )));
    }
    if n_heads == 0 || fusion_layers == 0 {
        return Err(Error::Frequency(
            "strategies need at least one head and one fusion layer".into(),
        ));
    }
    strategy_self_heads(kind, n_heads, fusion_layers, rng)
        .into_iter()
        .map(|p0| ViewAssignment::from_frequencies(2, &[p0, n_heads - p0]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(l: &[usize]) -> ModalityLayout {
        ModalityLayout::new(l.to_vec()).unwrap()
    }

    #[test]
    fn view_sets() {
        assert_eq!(enumerate_views(1), vec![AttentionView::SelfView]);
        assert_eq!(
            enumerate_views(3),
            vec![
                AttentionView::SelfView,
                AttentionView::Cross(0, 1),
                AttentionView::Cross(0, 2),
                AttentionView::Cross(1, 2),
            ]
        );
        assert_eq!(enumerate_views(4).len(), 7);
    }

    #[test]
    fn allowed_key_examples() {
        let l = layout(&[2, 3]);
        assert_eq!(allowed_keys(AttentionView::SelfView, &l, 0).unwrap(), vec![0, 1]);
        assert_eq!(allowed_keys(AttentionView::Cross(0, 1), &l, 3).unwrap(), vec![0, 1]);
        let l3 = layout(&[2, 3, 4]);
        assert!(allowed_keys(AttentionView::Cross(0, 1), &l3, 7).unwrap().is_empty());
        assert!(matches!(
            allowed_keys(AttentionView::SelfView, &l, 5),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn layout_rejects_empty_modality() {
        assert!(ModalityLayout::new(vec![3, 0]).is_err());
        assert!(ModalityLayout::new(vec![]).is_err());
        let l = layout(&[2, 3, 4]);
        assert_eq!(l.offsets(), &[0, 2, 5, 9]);
        assert_eq!(l.modality_of(4).unwrap(), 1);
        assert_eq!(l.modality_of(5).unwrap(), 2);
    }

    #[test]
    fn mask_examples() {
        let l = layout(&[2, 2]);
        let masks = mask_grid(&ViewAssignment::all_self(2), &l).unwrap();
        for m in &masks {
            assert_eq!(m.count(), 8);
            assert!(m.get(0, 1) && !m.get(0, 2) && m.get(3, 2));
        }
        let cross = ViewAssignment::new(vec![AttentionView::Cross(0, 1)]).unwrap();
        let m = &mask_grid(&cross, &l).unwrap()[0];
        assert_eq!(m.count(), 8);
        assert!(!m.get(0, 0) && m.get(0, 2) && m.get(2, 1));

        let single = mask_grid(&ViewAssignment::all_self(1), &layout(&[4])).unwrap();
        assert_eq!(single[0].count(), 16);
    }

    #[test]
    fn assignment_is_sorted_and_counts_heads() {
        let a = ViewAssignment::new(vec![
            AttentionView::Cross(1, 2),
            AttentionView::SelfView,
            AttentionView::Cross(0, 1),
        ])
        .unwrap();
        assert_eq!(a.views()[0], AttentionView::SelfView);
        assert_eq!(a.frequencies(3), vec![1, 1, 0, 1]);
        assert_eq!(ViewAssignment::from_frequencies(3, &[1, 1, 0, 1]).unwrap(), a);
        assert!(ViewAssignment::from_frequencies(2, &[1, 1, 1]).is_err());
    }

    #[test]
    fn strategy_examples() {
        let mut rng = Rng::new(0);
        let p0 = |k| strategy_self_heads(k, 12, 4, &mut Rng::new(0));
        assert_eq!(p0(Strategy::Spread), vec![9, 6, 3, 0]);
        assert_eq!(p0(Strategy::Bottleneck), vec![9, 6, 6, 9]);
        assert_eq!(p0(Strategy::Alternating), vec![12, 0, 12, 0]);
        assert_eq!(
            strategy_self_heads(Strategy::Bottleneck, 12, 5, &mut rng),
            vec![10, 8, 6, 8, 10]
        );
        assert_eq!(strategy_self_heads(Strategy::Spread, 4, 1, &mut rng), vec![0]);
        assert!(matches!(
            make_strategy(Strategy::Spread, 4, 2, 3, &mut rng),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn random_strategy_stays_in_budget() {
        let mut rng = Rng::new(9);
        for _ in 0..50 {
            let plan = make_strategy(Strategy::Random, 6, 5, 2, &mut rng).unwrap();
            for a in &plan {
                let f = a.frequencies(2);
                assert_eq!(f[0] + f[1], 6);
            }
        }
    }
}
