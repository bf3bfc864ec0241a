//! Feature extraction for partially placed molecules.
//!
//! All placed atoms are embedded by nuclear charge and refined through a
//! stack of interaction blocks; each block updates per-atom features with
//! a continuous-filter convolution whose filters are generated from a
//! radial basis expansion of the interatomic distances. The embedding of
//! the still-unplaced atom never enters the interaction stack; it
//! conditions the result through a final entry-wise product, so every
//! output row carries both the local geometry of a placed atom and the
//! identity of the atom about to be placed.
//!
//! The whole computation depends on geometry only through the placed-atom
//! distance matrix, which makes it invariant to rotations and
//! translations by construction.

use thiserror::Error;

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::bins::DistanceBins;
use crate::chem::{charge_index, DistanceMatrix, OrderedMolecule, NUM_ELEMENTS};
use crate::config::ModelConfig;
use crate::params::{Init, ParamSpec, ParameterStore, StoreBinding};
use crate::real::Real;

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("unsupported nuclear charge {0}")]
    UnsupportedCharge(u8),
    #[error("partial state needs at least one placed atom")]
    Empty,
    #[error("distance matrix is {got}x{got} but {expected} atoms are placed")]
    DistanceShape { got: usize, expected: usize },
}

/// The conditional context of one placement step: the placed prefix plus
/// the nuclear charge of the atom to place next.
#[derive(Clone, Debug)]
pub struct PartialState {
    placed_charges: Vec<u8>,
    distances: DistanceMatrix,
    next_charge: u8,
}

impl PartialState {
    pub fn new(
        placed_charges: Vec<u8>,
        distances: DistanceMatrix,
        next_charge: u8,
    ) -> Result<Self, EncodeError> {
        if placed_charges.is_empty() {
            return Err(EncodeError::Empty);
        }
        if distances.n() != placed_charges.len() {
            return Err(EncodeError::DistanceShape {
                got: distances.n(),
                expected: placed_charges.len(),
            });
        }
        for &z in placed_charges.iter().chain(std::iter::once(&next_charge)) {
            if charge_index(z).is_none() {
                return Err(EncodeError::UnsupportedCharge(z));
            }
        }
        Ok(PartialState { placed_charges, distances, next_charge })
    }

    pub fn from_positions(
        placed_charges: Vec<u8>,
        positions: &[[f64; 3]],
        next_charge: u8,
    ) -> Result<Self, EncodeError> {
        let distances = DistanceMatrix::from_positions(positions);
        Self::new(placed_charges, distances, next_charge)
    }

    /// The step-i context of an ordered molecule: atoms 0..i placed, atom
    /// i next (0-based; i >= 1).
    pub fn from_prefix(om: &OrderedMolecule, i: usize) -> Result<Self, EncodeError> {
        assert!(i >= 1 && i < om.len(), "prefix length {i} out of range 1..{}", om.len());
        Self::new(om.charges()[..i].to_vec(), om.distance_matrix().prefix(i), om.charges()[i])
    }

    pub fn placed(&self) -> usize {
        self.placed_charges.len()
    }

    pub fn placed_charges(&self) -> &[u8] {
        &self.placed_charges
    }

    pub fn distances(&self) -> &DistanceMatrix {
        &self.distances
    }

    pub fn next_charge(&self) -> u8 {
        self.next_charge
    }
}

// ── parameters ──────────────────────────────────────────────────────

pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let f = cfg.features;
    let g = cfg.filter_rbf;
    let xavier = |fan_in| Init::XavierUniform { fan_in };
    let mut specs = vec![ParamSpec::new(
        "embed.table",
        NUM_ELEMENTS,
        f,
        Init::Gaussian { std: 1.0 / (f as f64).sqrt() },
    )];
    for b in 0..cfg.blocks {
        let p = |suffix: &str| format!("block{b}.{suffix}");
        specs.push(ParamSpec::new(p("atomwise_in.w"), f, f, xavier(f)));
        specs.push(ParamSpec::new(p("atomwise_in.b"), 1, f, Init::Zero));
        specs.push(ParamSpec::new(p("filter1.w"), g, f, xavier(g)));
        specs.push(ParamSpec::new(p("filter1.b"), 1, f, Init::Zero));
        specs.push(ParamSpec::new(p("filter2.w"), f, f, xavier(f)));
        specs.push(ParamSpec::new(p("filter2.b"), 1, f, Init::Zero));
        specs.push(ParamSpec::new(p("atomwise_mid.w"), f, f, xavier(f)));
        specs.push(ParamSpec::new(p("atomwise_mid.b"), 1, f, Init::Zero));
        specs.push(ParamSpec::new(p("atomwise_out.w"), f, f, xavier(f)));
        specs.push(ParamSpec::new(p("atomwise_out.b"), 1, f, Init::Zero));
    }
    specs
}

#[derive(Clone, Copy, Debug)]
pub struct FilterBinding {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockBinding {
    pub in_w: NodeId,
    pub in_b: NodeId,
    pub filter: FilterBinding,
    pub mid_w: NodeId,
    pub mid_b: NodeId,
    pub out_w: NodeId,
    pub out_b: NodeId,
}

#[derive(Clone, Debug)]
pub struct EncoderBinding {
    pub embedding: NodeId,
    pub blocks: Vec<BlockBinding>,
}

impl EncoderBinding {
    pub fn new<R: Real>(
        binding: &StoreBinding,
        store: &ParameterStore<R>,
        cfg: &ModelConfig,
    ) -> Self {
        let id = |name: &str| binding.id(store, name);
        let blocks = (0..cfg.blocks)
            .map(|b| {
                let p = |suffix: &str| format!("block{b}.{suffix}");
                BlockBinding {
                    in_w: id(&p("atomwise_in.w")),
                    in_b: id(&p("atomwise_in.b")),
                    filter: FilterBinding {
                        w1: id(&p("filter1.w")),
                        b1: id(&p("filter1.b")),
                        w2: id(&p("filter2.w")),
                        b2: id(&p("filter2.b")),
                    },
                    mid_w: id(&p("atomwise_mid.w")),
                    mid_b: id(&p("atomwise_mid.b")),
                    out_w: id(&p("atomwise_out.w")),
                    out_b: id(&p("atomwise_out.b")),
                }
            })
            .collect();
        EncoderBinding { embedding: id("embed.table"), blocks }
    }
}

/// Dense layer: x . w + b (row-broadcast bias).
pub fn dense<R: Real>(tape: &mut Tape<R>, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
    let xw = tape.matmul(x, w);
    tape.add_row(xw, b)
}

/// Continuous-filter convolution over the placed atoms:
/// `out_j = sum_{k != j} features_k * W(d_jk)` with `W` the filter
/// network applied to the radial basis expansion of each pair distance.
/// A single placed atom has no neighbors, so its output is zero.
pub fn cfconv<R: Real>(
    tape: &mut Tape<R>,
    filter: &FilterBinding,
    basis: &DistanceBins,
    features: NodeId,
    dists: &DistanceMatrix,
) -> NodeId {
    let i = dists.n();
    let (feat_rows, _f) = tape.shape(features);
    assert_eq!(feat_rows, i, "cfconv: {feat_rows} feature rows for {i} placed atoms");

    let mut rbf = Vec::with_capacity(i * (i.saturating_sub(1)) * basis.count());
    let mut targets = Vec::new();
    let mut sources = Vec::new();
    for j in 0..i {
        for k in 0..i {
            if k == j {
                continue;
            }
            rbf.extend(basis.expand(dists.get(j, k)).into_iter().map(R::from_f64));
            targets.push(j);
            sources.push(k);
        }
    }
    let pairs = targets.len();
    let rbf_node = tape.leaf(&Tensor::new(pairs, basis.count(), rbf));

    let h = dense(tape, rbf_node, filter.w1, filter.b1);
    let h = tape.ssp(h);
    let h = dense(tape, h, filter.w2, filter.b2);
    let filters = tape.ssp(h);

    let neighbors = tape.gather_rows(features, &sources);
    let weighted = tape.mul(neighbors, filters);
    tape.scatter_sum_rows(weighted, &targets, i)
}

fn interaction_block<R: Real>(
    tape: &mut Tape<R>,
    blk: &BlockBinding,
    basis: &DistanceBins,
    x: NodeId,
    dists: &DistanceMatrix,
) -> NodeId {
    let f = dense(tape, x, blk.in_w, blk.in_b);
    let conv = cfconv(tape, &blk.filter, basis, f, dists);
    let v = dense(tape, conv, blk.mid_w, blk.mid_b);
    let v = tape.ssp(v);
    let v = dense(tape, v, blk.out_w, blk.out_b);
    tape.add(x, v)
}

/// Placed-atom features after the interaction stack, before conditioning
/// on the next atom's type.
pub fn interaction_features<R: Real>(
    tape: &mut Tape<R>,
    bind: &EncoderBinding,
    cfg: &ModelConfig,
    state: &PartialState,
) -> NodeId {
    let placed_idx: Vec<usize> = state
        .placed_charges()
        .iter()
        .map(|&z| charge_index(z).expect("charges validated at construction"))
        .collect();
    let mut x = tape.gather_rows(bind.embedding, &placed_idx);
    let basis = cfg.filter_bins();
    for blk in &bind.blocks {
        x = interaction_block(tape, blk, &basis, x, state.distances());
    }
    x
}

/// Per-placed-atom feature vectors conditioned on the next atom's type:
/// the interaction output multiplied entry-wise by that atom's embedding.
pub fn encode<R: Real>(
    tape: &mut Tape<R>,
    bind: &EncoderBinding,
    cfg: &ModelConfig,
    state: &PartialState,
) -> NodeId {
    let x = interaction_features(tape, bind, cfg, state);
    let next_idx = charge_index(state.next_charge()).expect("validated at construction");
    let cond = tape.gather_rows(bind.embedding, &[next_idx]);
    tape.mul_row(x, cond)
}
