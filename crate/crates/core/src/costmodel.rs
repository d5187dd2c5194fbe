//! Closed-form attention costs for the five fusion patterns.
//!
//! Costs count the multiplications of the query-key product of one layer
//! (one unit per multiply, hidden size `d` split evenly over heads) and are
//! exact rationals: the LoCoMT cost has denominator `n_heads`.
//! [`model_flops`] is the separate whole-model estimate, counting every
//! matrix product with multiply-add = 2 FLOPs.

use std::fmt;

use num_rational::Ratio;

use crate::error::{Error, Result};
use crate::model::{FusionPattern, ModelConfig};
use crate::numerics::{FlopBreakdown, MatmulKind};
use crate::viewconfig::{enumerate_views, AttentionView, KeyScope, ModalityLayout};

pub type Cost = Ratio<i128>;

/// Inputs to the cost formulas.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostQuery {
    pub layout: ModalityLayout,
    pub d: usize,
    pub n_heads: usize,
    /// Head count per element of `enumerate_views(m)`: `p_0` then every `p_ij`.
    pub frequencies: Vec<usize>,
    pub bottleneck: usize,
}

impl CostQuery {
    pub fn new(
        layout: ModalityLayout,
        d: usize,
        n_heads: usize,
        frequencies: Vec<usize>,
        bottleneck: usize,
    ) -> Result<Self> {
        if d == 0 || n_heads == 0 {
            return Err(Error::Config("d and n_heads must be positive".into()));
        }
        let views = enumerate_views(layout.modalities()).len();
        if frequencies.len() != views {
            return Err(Error::Frequency(format!(
                "expected {views} view frequencies, got {}",
                frequencies.len()
            )));
        }
        Ok(Self {
            layout,
            d,
            n_heads,
            frequencies,
            bottleneck,
        })
    }

    pub fn self_heads(&self) -> usize {
        self.frequencies[0]
    }

    fn lengths(&self) -> impl Iterator<Item = i128> + '_ {
        self.layout.lengths().iter().map(|&l| l as i128)
    }

    fn d(&self) -> i128 {
        self.d as i128
    }

    /// `(i, j, p_ij)` for every cross view.
    fn cross_heads(&self) -> impl Iterator<Item = (usize, usize, i128)> + '_ {
        enumerate_views(self.layout.modalities())
            .into_iter()
            .zip(&self.frequencies)
            .filter_map(|(v, &p)| match v {
                AttentionView::Cross(i, j) => Some((i, j, p as i128)),
                AttentionView::SelfView => None,
            })
    }

    fn check_budget(&self) -> Result<()> {
        let used: usize = self.frequencies.iter().sum();
        if used != self.n_heads {
            return Err(Error::Frequency(format!(
                "view frequencies sum to {used} but there are {} heads",
                self.n_heads
            )));
        }
        Ok(())
    }
}

pub fn cost_self(q: &CostQuery) -> Cost {
    Cost::from_integer(q.lengths().map(|l| l * l).sum::<i128>() * q.d())
}

pub fn cost_cross(q: &CostQuery) -> Result<Cost> {
    match q.layout.lengths() {
        &[a, b] => Ok(Cost::from_integer(2 * a as i128 * b as i128 * q.d())),
        other => Err(Error::Unsupported(format!(
            "cross-attention cost is defined for two modalities, got {}",
            other.len()
        ))),
    }
}

pub fn cost_multi(q: &CostQuery) -> Cost {
    let total: i128 = q.lengths().sum();
    Cost::from_integer(total * total * q.d())
}

pub fn cost_bottle(q: &CostQuery) -> Cost {
    let b = q.bottleneck as i128;
    Cost::from_integer(q.lengths().map(|l| (l + b) * (l + b)).sum::<i128>() * q.d())
}

pub fn cost_locomt(q: &CostQuery) -> Result<Cost> {
    q.check_budget()?;
    let l = q.layout.lengths();
    let squares: i128 = q.lengths().map(|x| x * x).sum();
    let mut numer = q.self_heads() as i128 * squares;
    for (i, j, p) in q.cross_heads() {
        numer += 2 * p * l[i] as i128 * l[j] as i128;
    }
    Ok(Cost::new(numer * q.d(), q.n_heads as i128))
}

/// `C_self - C_LoCoMT` through its closed form: every cross head saves the
/// squares of the modalities it ignores plus `(L_i - L_j)^2`.
pub fn cost_gap_self_locomt(q: &CostQuery) -> Result<Cost> {
    q.check_budget()?;
    let l: Vec<i128> = q.lengths().collect();
    let mut numer = 0;
    for (i, j, p) in q.cross_heads() {
        let others: i128 = l
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != i && k != j)
            .map(|(_, x)| x * x)
            .sum();
        numer += p * (others + (l[i] - l[j]).pow(2));
    }
    Ok(Cost::new(numer * q.d(), q.n_heads as i128))
}

/// All five costs for one query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub c_self: Cost,
    /// Only defined for two modalities.
    pub c_cross: Option<Cost>,
    pub c_multi: Cost,
    pub c_bottle: Cost,
    pub c_locomt: Cost,
    pub gap: Cost,
}

impl CostReport {
    pub fn compute(q: &CostQuery) -> Result<Self> {
        Ok(Self {
            c_self: cost_self(q),
            c_cross: cost_cross(q).ok(),
            c_multi: cost_multi(q),
            c_bottle: cost_bottle(q),
            c_locomt: cost_locomt(q)?,
            gap: cost_gap_self_locomt(q)?,
        })
    }
}

/// Which links of `C_LoCoMT <= C_self < C_bottle < C_multi` (and, for two
/// modalities, `C_cross <= C_self`) hold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OrderingVerdict {
    pub locomt_le_self: bool,
    pub locomt_eq_self: bool,
    pub self_lt_bottle: bool,
    pub bottle_lt_multi: bool,
    pub cross_le_self: Option<bool>,
    /// `4 * B <= min L_i`, the small-bottleneck regime the chain assumes.
    pub small_bottleneck: bool,
}

impl OrderingVerdict {
    pub fn chain_holds(&self) -> bool {
        self.locomt_le_self && self.self_lt_bottle && self.bottle_lt_multi
    }
}

impl fmt::Display for OrderingVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mark = |b: bool| if b { "holds" } else { "FAILS" };
        writeln!(
            f,
            "locomt <= self: {}{}",
            mark(self.locomt_le_self),
            if self.locomt_eq_self { " (equality)" } else { "" }
        )?;
        writeln!(f, "self < bottle: {}", mark(self.self_lt_bottle))?;
        writeln!(f, "bottle < multi: {}", mark(self.bottle_lt_multi))?;
        if let Some(c) = self.cross_le_self {
            writeln!(f, "cross <= self: {}", mark(c))?;
        }
        if !self.small_bottleneck {
            writeln!(f, "note: bottleneck size is outside the B << L regime (4B > min L)")?;
        }
        write!(f, "chain: {}", mark(self.chain_holds()))
    }
}

pub fn verify_ordering(q: &CostQuery) -> Result<OrderingVerdict> {
    if q.bottleneck == 0 {
        return Err(Error::Config(
            "ordering check needs at least one bottleneck token".into(),
        ));
    }
    let r = CostReport::compute(q)?;
    let min_len = *q.layout.lengths().iter().min().unwrap();
    Ok(OrderingVerdict {
        locomt_le_self: r.c_locomt <= r.c_self,
        locomt_eq_self: r.c_locomt == r.c_self,
        self_lt_bottle: r.c_self < r.c_bottle,
        bottle_lt_multi: r.c_bottle < r.c_multi,
        cross_le_self: r.c_cross.map(|c| c <= r.c_self),
        small_bottleneck: 4 * q.bottleneck <= min_len,
    })
}

/// Renders a cost as an integer when it is one, else as `numer/denom`.
pub fn format_cost(c: &Cost) -> String {
    if c.is_integer() {
        c.to_integer().to_string()
    } else {
        format!("{}/{}", c.numer(), c.denom())
    }
}

/// Forward-pass FLOPs of one matrix-product class in an attention layer over
/// `tokens` rows.
fn layer_dense_flops(tokens: u64, d: u64, d_ff: u64, out: &mut FlopBreakdown) {
    // Q, K and V for every head plus the output projection: 4 * (2 N d d).
    out.add(MatmulKind::Projection, 8 * tokens * d * d);
    out.add(MatmulKind::FeedForward, 4 * tokens * d * d_ff);
}

fn scope_attention_flops(scope: KeyScope, layout: &ModalityLayout, d_head: u64, out: &mut FlopBreakdown) {
    let m = layout.modalities();
    for q in 0..m {
        let keys: usize = scope.key_modalities(q, m).iter().map(|&k| layout.len(k)).sum();
        let pairs = (layout.len(q) * keys) as u64;
        out.add(MatmulKind::Score, 2 * pairs * d_head);
        out.add(MatmulKind::Value, 2 * pairs * d_head);
    }
}

/// FLOPs of one forward pass of one sample, by product class.
///
/// Covers the modality embeddings, every Q/K/V/O projection, the score and
/// value products restricted to each layer's masks, the feed-forward blocks
/// and the classifier head.
pub fn model_flops(config: &ModelConfig) -> Result<FlopBreakdown> {
    config.validate()?;
    let mut out = FlopBreakdown::default();
    let d = config.d as u64;
    let d_ff = config.d_ff as u64;
    let d_head = (config.d / config.n_heads) as u64;
    let layout = config.packed_layout();

    for (len, feat) in config.lengths.iter().zip(&config.feature_dims) {
        out.add(MatmulKind::Embed, 2 * (*len as u64) * (*feat as u64) * d);
    }

    let tokens = layout.total() as u64;
    for layer in 0..config.layers {
        match config.fusion_index(layer) {
            None => {
                layer_dense_flops(tokens, d, d_ff, &mut out);
                for _ in 0..config.n_heads {
                    scope_attention_flops(KeyScope::Own, &layout, d_head, &mut out);
                }
            }
            Some(f) => match config.pattern {
                FusionPattern::Bottleneck => {
                    let b = config.bottleneck_tokens;
                    for k in 0..layout.modalities() {
                        let n = layout.len(k) + b;
                        layer_dense_flops(n as u64, d, d_ff, &mut out);
                        let single = ModalityLayout::new(vec![n])?;
                        for _ in 0..config.n_heads {
                            scope_attention_flops(KeyScope::All, &single, d_head, &mut out);
                        }
                    }
                }
                _ => {
                    layer_dense_flops(tokens, d, d_ff, &mut out);
                    for scope in config.fusion_scopes(f) {
                        scope_attention_flops(scope, &layout, d_head, &mut out);
                    }
                }
            },
        }
    }
    out.add(MatmulKind::Head, 2 * d * config.num_classes as u64);
    Ok(out)
}

/// Attention-score FLOPs implied by a cost value: `2 * C`, when that is an
/// integer.
pub fn score_flops(cost: &Cost) -> Option<u64> {
    let twice = cost * Cost::from_integer(2);
    twice.is_integer().then(|| twice.to_integer() as u64)
}
