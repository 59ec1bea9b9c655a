//! Pairwise label relation inference.
//!
//! For every ordered label pair `(l, m)` a private relation unit reads the
//! concatenated attentional parcels of the two labels and produces a
//! relation feature. The per-label existence score accumulates the pooled
//! relation features over all partners `m != l` and feeds them through a
//! head shared by all labels, ending in a sigmoid.
//!
//! The main unit variant is a 1x1 convolution over the concatenated maps,
//! keeping spatial context; the ablation variant pools first and applies a
//! dense layer instead.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionalParcel;
use crate::error::{Error, Result};
use crate::param::Param;
use crate::tensor::{Tape, Tensor};

/// How a relation unit consumes a parcel pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitKind {
    /// 1x1 convolution over the concatenated maps, pooled afterwards.
    Conv,
    /// Global average pooling first, then one dense layer.
    Mlp,
}

/// Relation unit for one ordered pair `(l, m)`; parameters are not shared
/// across pairs, so `(l, m)` and `(m, l)` learn independently.
#[derive(Clone, Debug)]
pub struct PairwiseUnit {
    pub l: usize,
    pub m: usize,
    pub kind: UnitKind,
    pub weight: Param,
    pub bias: Param,
}

impl PairwiseUnit {
    pub fn new(
        l: usize,
        m: usize,
        kind: UnitKind,
        parcel_channels: usize,
        relation_channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (k2, d) = (2 * parcel_channels, relation_channels);
        let weight = match kind {
            UnitKind::Conv => {
                Param::glorot_conv(format!("relation.unit{l}_{m}.weight"), d, k2, 1, 1, rng)
            }
            UnitKind::Mlp => Param::glorot_fc(format!("relation.unit{l}_{m}.weight"), d, k2, rng),
        };
        PairwiseUnit {
            l,
            m,
            kind,
            weight,
            bias: Param::zeros(format!("relation.unit{l}_{m}.bias"), &[d]),
        }
    }
}

/// Index of unit `(l, m)` in the canonical l-major unit list.
pub fn unit_index(l: usize, m: usize, num_labels: usize) -> usize {
    debug_assert!(l != m && l < num_labels && m < num_labels);
    l * (num_labels - 1) + if m < l { m } else { m - 1 }
}

/// All `L*(L-1)` units in canonical order.
pub fn build_units(
    num_labels: usize,
    kind: UnitKind,
    parcel_channels: usize,
    relation_channels: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<PairwiseUnit> {
    let mut units = Vec::with_capacity(num_labels * (num_labels - 1));
    for l in 0..num_labels {
        for m in 0..num_labels {
            if m != l {
                units.push(PairwiseUnit::new(
                    l,
                    m,
                    kind,
                    parcel_channels,
                    relation_channels,
                    rng,
                ));
            }
        }
    }
    units
}

/// Shared head mapping a summed relation vector to one score.
#[derive(Clone, Debug)]
pub struct RelationHead {
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
}

impl RelationHead {
    pub fn new(relation_channels: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        RelationHead {
            w1: Param::glorot_fc("relation.head.w1", hidden, relation_channels, rng),
            b1: Param::zeros("relation.head.b1", &[hidden]),
            w2: Param::glorot_fc("relation.head.w2", 1, hidden, rng),
            b2: Param::zeros("relation.head.b2", &[1]),
        }
    }
}

/// A pairwise unit bound onto a tape.
#[derive(Clone)]
pub struct BoundUnit {
    pub l: usize,
    pub m: usize,
    pub kind: UnitKind,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl BoundUnit {
    pub fn new(unit: &PairwiseUnit, weight: Tensor, bias: Tensor) -> Self {
        BoundUnit { l: unit.l, m: unit.m, kind: unit.kind, weight, bias }
    }
}

/// The relation head bound onto a tape.
#[derive(Clone)]
pub struct BoundHead {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl BoundHead {
    /// Pre-sigmoid score of one relation vector.
    pub fn score(&self, tape: &Tape, v: &Tensor) -> Result<Tensor> {
        let h = tape.fully_connected(v, &self.w1, &self.b1)?;
        let h = tape.relu(&h);
        tape.fully_connected(&h, &self.w2, &self.b2)
    }

    /// Probability in (0, 1).
    pub fn prob(&self, tape: &Tape, v: &Tensor) -> Result<Tensor> {
        Ok(tape.sigmoid(&self.score(tape, v)?))
    }
}

/// Relation features of one ordered pair. The conv variant returns
/// `[D, H, W]`; the mlp variant returns `[D]`.
pub fn pairwise_g(
    tape: &Tape,
    a_l: &AttentionalParcel,
    a_m: &AttentionalParcel,
    unit: &BoundUnit,
) -> Result<Tensor> {
    if a_l.label_index != unit.l || a_m.label_index != unit.m {
        return Err(Error::contract(format!(
            "unit ({}, {}) applied to parcels ({}, {})",
            unit.l, unit.m, a_l.label_index, a_m.label_index
        )));
    }
    if a_l.maps.shape() != a_m.maps.shape() {
        return Err(Error::shape(format!(
            "parcel shapes differ: {:?} vs {:?}",
            a_l.maps.shape(),
            a_m.maps.shape()
        )));
    }
    let cat = tape.concat_channels(&a_l.maps, &a_m.maps)?;
    match unit.kind {
        UnitKind::Conv => tape.conv2d(&cat, &unit.weight, &unit.bias, 1, 0, 1),
        UnitKind::Mlp => {
            let pooled = tape.global_avg_pool(&cat)?;
            tape.fully_connected(&pooled, &unit.weight, &unit.bias)
        }
    }
}

/// Pooled `[D]` relation vector of one ordered pair.
fn pair_vector(
    tape: &Tape,
    a_l: &AttentionalParcel,
    a_m: &AttentionalParcel,
    unit: &BoundUnit,
) -> Result<Tensor> {
    let g = pairwise_g(tape, a_l, a_m, unit)?;
    match unit.kind {
        UnitKind::Conv => tape.global_avg_pool(&g),
        UnitKind::Mlp => Ok(g),
    }
}

/// Existence probability of label `l` from its accumulated relations.
pub fn aggregate_label(
    tape: &Tape,
    l: usize,
    parcels: &[AttentionalParcel],
    units: &[BoundUnit],
    head: &BoundHead,
) -> Result<Tensor> {
    let order: Vec<usize> = (0..parcels.len()).filter(|&m| m != l).collect();
    aggregate_label_ordered(tape, l, parcels, units, head, &order)
}

/// Same as [`aggregate_label`] but evaluating the relation units in the
/// given order over `m`. The partial sums are always reduced in ascending
/// `m` order, so the result is bit-identical under any permutation.
pub fn aggregate_label_ordered(
    tape: &Tape,
    l: usize,
    parcels: &[AttentionalParcel],
    units: &[BoundUnit],
    head: &BoundHead,
    m_order: &[usize],
) -> Result<Tensor> {
    let num_labels = parcels.len();
    if num_labels < 2 {
        return Err(Error::contract("relation aggregation needs at least two labels"));
    }
    let mut expected: Vec<usize> = (0..num_labels).filter(|&m| m != l).collect();
    let mut sorted = m_order.to_vec();
    sorted.sort_unstable();
    expected.sort_unstable();
    if sorted != expected {
        return Err(Error::contract(format!(
            "m_order {m_order:?} is not a permutation of the partners of {l}"
        )));
    }

    let mut terms: Vec<Option<Tensor>> = vec![None; num_labels];
    for &m in m_order {
        let unit = &units[unit_index(l, m, num_labels)];
        terms[m] = Some(pair_vector(tape, &parcels[l], &parcels[m], unit)?);
    }
    let mut acc: Option<Tensor> = None;
    for term in terms.into_iter().flatten() {
        acc = Some(match acc {
            None => term,
            Some(prev) => tape.add(&prev, &term)?,
        });
    }
    head.prob(tape, &acc.expect("at least one partner"))
}

/// Probabilities for all labels, `[L]`.
pub fn forward_all(
    tape: &Tape,
    parcels: &[AttentionalParcel],
    units: &[BoundUnit],
    head: &BoundHead,
) -> Result<Tensor> {
    let probs: Vec<Tensor> = (0..parcels.len())
        .map(|l| aggregate_label(tape, l, parcels, units, head))
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = probs.iter().collect();
    tape.concat1d(&refs)
}

/// Pairwise relation scores with a null diagonal, row-normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationMatrix {
    size: usize,
    entries: Vec<Option<f64>>,
}

impl RelationMatrix {
    /// Build from raw scores (diagonal `None`), min-max scaling every row
    /// over its off-diagonal entries. A row whose entries are all equal
    /// (including the single-entry rows of L = 2) maps to 1.0.
    pub fn from_scores(size: usize, scores: Vec<Option<f64>>) -> Result<Self> {
        if scores.len() != size * size {
            return Err(Error::contract(format!(
                "expected {} entries, got {}",
                size * size,
                scores.len()
            )));
        }
        let mut entries = scores;
        for l in 0..size {
            let row = &mut entries[l * size..(l + 1) * size];
            let present: Vec<f64> = row.iter().flatten().copied().collect();
            if present.is_empty() {
                continue;
            }
            let min = present.iter().copied().fold(f64::INFINITY, f64::min);
            let max = present.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = max - min;
            for e in row.iter_mut() {
                if let Some(v) = e {
                    *v = if span > 0.0 { (*v - min) / span } else { 1.0 };
                }
            }
        }
        Ok(RelationMatrix { size, entries })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Normalized entry `(l, m)`; `None` on the diagonal.
    pub fn get(&self, l: usize, m: usize) -> Option<f64> {
        self.entries[l * self.size + m]
    }

    /// Comma-separated grid, empty diagonal cells, six decimal places.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for l in 0..self.size {
            let row: Vec<String> = (0..self.size)
                .map(|m| match self.get(l, m) {
                    Some(v) => format!("{v:.6}"),
                    None => String::new(),
                })
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Score every ordered pair separately and assemble the relation matrix.
pub fn relation_matrix(
    tape: &Tape,
    parcels: &[AttentionalParcel],
    units: &[BoundUnit],
    head: &BoundHead,
) -> Result<RelationMatrix> {
    let num_labels = parcels.len();
    if num_labels < 2 {
        return Err(Error::contract("relation matrix needs at least two labels"));
    }
    let mut scores = vec![None; num_labels * num_labels];
    for l in 0..num_labels {
        for m in 0..num_labels {
            if m == l {
                continue;
            }
            let unit = &units[unit_index(l, m, num_labels)];
            let v = pair_vector(tape, &parcels[l], &parcels[m], unit)?;
            let s = head.score(tape, &v)?;
            scores[l * num_labels + m] = Some(tape.scalar_value(&s));
        }
    }
    RelationMatrix::from_scores(num_labels, scores)
}
