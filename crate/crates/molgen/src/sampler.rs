//! Sequential molecule generation over a fixed spatial grid.
//!
//! For each candidate cell the placed atoms' distance distributions are
//! combined multiplicatively (in log space, so the normalization over
//! all cells never underflows) and the next atom's position is drawn
//! from the resulting categorical field. The first atom goes to the grid
//! center; distance-conditioned models are translation invariant, so the
//! choice is free.

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::autodiff::Tape;
use crate::chem::{charge_index, charge_to_symbol, symbol_to_charge, Molecule};
use crate::config::ModelConfig;
use crate::encoder::{encode, EncodeError, EncoderBinding, PartialState};
use crate::head::{logits, HeadBinding, HeadError};
use crate::params::{ParameterStore, StoreBinding};
use crate::real::Real;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("placed atom {index} at ({x:.3}, {y:.3}, {z:.3}) lies outside the grid")]
    AtomOutsideGrid { index: usize, x: f64, y: f64, z: f64 },
    #[error("drew an occupied cell {0} times in a row; giving up")]
    RedrawLimit(usize),
    #[error("composition plan is empty")]
    EmptyPlan,
    #[error("hydrogens must come after all heavy atoms in a composition plan")]
    HydrogenOrder,
    #[error("cannot parse formula {0:?}")]
    BadFormula(String),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error("molecule assembly failed: {0}")]
    Assembly(String),
}

/// Cubic candidate-position lattice: `steps` points per axis spanning
/// [-extent, extent].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerationGrid {
    extent: f64,
    steps: usize,
}

impl GenerationGrid {
    pub fn new(extent: f64, steps: usize) -> Self {
        assert!(steps >= 2 && extent > 0.0);
        GenerationGrid { extent, steps }
    }

    pub fn from_config(cfg: &ModelConfig) -> Self {
        GenerationGrid::new(cfg.grid_extent, cfg.grid_steps)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn extent(&self) -> f64 {
        self.extent
    }

    pub fn cell_count(&self) -> usize {
        self.steps * self.steps * self.steps
    }

    /// Spacing between neighboring grid points along one axis.
    pub fn step_size(&self) -> f64 {
        2.0 * self.extent / (self.steps - 1) as f64
    }

    fn axis_coord(&self, i: usize) -> f64 {
        -self.extent + i as f64 * self.step_size()
    }

    pub fn coords(&self, cell: usize) -> [f64; 3] {
        debug_assert!(cell < self.cell_count());
        let z = cell % self.steps;
        let y = (cell / self.steps) % self.steps;
        let x = cell / (self.steps * self.steps);
        [self.axis_coord(x), self.axis_coord(y), self.axis_coord(z)]
    }

    pub fn cell_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.steps + iy) * self.steps + iz
    }

    /// The cell nearest the origin (exactly the origin for odd `steps`).
    pub fn center_cell(&self) -> usize {
        let mid = (self.steps - 1) / 2;
        self.cell_index(mid, mid, mid)
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        p.iter().all(|&c| c.abs() <= self.extent + 1e-9)
    }

    /// Largest distance between any two grid cells (the cube diagonal).
    pub fn max_pairwise_distance(&self) -> f64 {
        crate::chem::dist(self.coords(0), self.coords(self.cell_count() - 1))
    }
}

/// The ordered sequence of nuclear charges to place.
#[derive(Clone, Debug)]
pub struct CompositionPlan {
    charges: Vec<u8>,
}

impl CompositionPlan {
    pub fn new(charges: Vec<u8>) -> Result<Self, SampleError> {
        if charges.is_empty() {
            return Err(SampleError::EmptyPlan);
        }
        for &z in &charges {
            if charge_index(z).is_none() {
                return Err(SampleError::Encode(EncodeError::UnsupportedCharge(z)));
            }
        }
        if let Some(first_h) = charges.iter().position(|&z| z == 1) {
            if charges[first_h..].iter().any(|&z| z != 1) {
                return Err(SampleError::HydrogenOrder);
            }
        }
        Ok(CompositionPlan { charges })
    }

    /// Shuffle the heavy atoms of a multiset; hydrogens go last.
    pub fn shuffled<RNG: Rng>(counts: &[(u8, usize)], rng: &mut RNG) -> Result<Self, SampleError> {
        let mut heavy = Vec::new();
        let mut n_h = 0;
        for &(z, n) in counts {
            if z == 1 {
                n_h += n;
            } else {
                heavy.extend(std::iter::repeat_n(z, n));
            }
        }
        heavy.shuffle(rng);
        heavy.extend(std::iter::repeat_n(1u8, n_h));
        CompositionPlan::new(heavy)
    }

    /// The composition of an existing molecule, heavy atoms shuffled.
    pub fn from_molecule<RNG: Rng>(m: &Molecule, rng: &mut RNG) -> Result<Self, SampleError> {
        let mut counts: Vec<(u8, usize)> = Vec::new();
        for &z in m.charges() {
            match counts.iter_mut().find(|(c, _)| *c == z) {
                Some((_, n)) => *n += 1,
                None => counts.push((z, 1)),
            }
        }
        Self::shuffled(&counts, rng)
    }

    /// Parse a formula like "C7O2H10" into (charge, count) pairs.
    pub fn parse_formula(formula: &str) -> Result<Vec<(u8, usize)>, SampleError> {
        let bad = || SampleError::BadFormula(formula.to_string());
        let mut counts = Vec::new();
        let chars: Vec<char> = formula.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            if !chars[i].is_ascii_alphabetic() {
                return Err(bad());
            }
            let sym = chars[i].to_string();
            i += 1;
            let z = symbol_to_charge(&sym).ok_or_else(bad)?;
            let mut digits = String::new();
            while i < chars.len() && chars[i].is_ascii_digit() {
                digits.push(chars[i]);
                i += 1;
            }
            let n: usize = if digits.is_empty() { 1 } else { digits.parse().map_err(|_| bad())? };
            if n == 0 {
                return Err(bad());
            }
            counts.push((z, n));
        }
        if counts.is_empty() {
            return Err(bad());
        }
        Ok(counts)
    }

    pub fn charges(&self) -> &[u8] {
        &self.charges
    }

    pub fn len(&self) -> usize {
        self.charges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.charges.is_empty()
    }
}

/// Normalized log-probabilities over every grid cell.
#[derive(Clone, Debug)]
pub struct LogField {
    grid: GenerationGrid,
    log_probs: Vec<f64>,
}

impl LogField {
    /// Wrap raw per-cell log-weights, normalizing via log-sum-exp.
    pub fn from_unnormalized(grid: GenerationGrid, mut log_weights: Vec<f64>) -> Self {
        assert_eq!(log_weights.len(), grid.cell_count());
        let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + log_weights.iter().map(|&w| (w - max).exp()).sum::<f64>().ln();
        for w in &mut log_weights {
            *w -= log_z;
        }
        LogField { grid, log_probs: log_weights }
    }

    pub fn grid(&self) -> &GenerationGrid {
        &self.grid
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn prob_sum(&self) -> f64 {
        self.log_probs.iter().map(|&w| w.exp()).sum()
    }

    pub fn argmax_cell(&self) -> usize {
        self.log_probs
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
            .map(|(i, _)| i)
            .unwrap()
    }
}

/// Per-atom log-distributions for a partial state, straight off the model.
fn atom_log_rows<R: Real>(
    cfg: &ModelConfig,
    store: &ParameterStore<R>,
    state: &PartialState,
    temperature: f64,
) -> Result<Vec<Vec<f64>>, SampleError> {
    let mut tape: Tape<R> = Tape::new();
    let sb = StoreBinding::bind(&mut tape, store);
    let enc = EncoderBinding::new(&sb, store, cfg);
    let head = HeadBinding::new(&sb, store);
    let feats = encode(&mut tape, &enc, cfg, state);
    let y = logits(&mut tape, &head, feats);
    Ok(crate::head::log_distributions(&mut tape, y, temperature)?)
}

/// The normalized probability field over grid cells for the next atom:
/// per cell, the product over placed atoms of the probability assigned to
/// the cell-to-atom distance bin.
pub fn position_log_field<R: Real>(
    cfg: &ModelConfig,
    store: &ParameterStore<R>,
    placed_charges: &[u8],
    placed_positions: &[[f64; 3]],
    next_charge: u8,
    temperature: f64,
) -> Result<LogField, SampleError> {
    let grid = GenerationGrid::from_config(cfg);
    for (index, &p) in placed_positions.iter().enumerate() {
        if !grid.contains(p) {
            return Err(SampleError::AtomOutsideGrid { index, x: p[0], y: p[1], z: p[2] });
        }
    }
    let state =
        PartialState::from_positions(placed_charges.to_vec(), placed_positions, next_charge)?;
    let rows = atom_log_rows(cfg, store, &state, temperature)?;
    Ok(accumulate_field(grid, cfg, &rows, placed_positions))
}

/// Field assembly from per-atom log-probability rows; shared by the
/// model path and the oracle comparisons.
pub fn accumulate_field(
    grid: GenerationGrid,
    cfg: &ModelConfig,
    log_rows: &[Vec<f64>],
    placed_positions: &[[f64; 3]],
) -> LogField {
    let bins = cfg.label_bins();
    let n_cells = grid.cell_count();
    let mut weights = vec![0.0f64; n_cells];
    for (cell, w) in weights.iter_mut().enumerate() {
        let p = grid.coords(cell);
        let mut s = 0.0;
        for (row, atom) in log_rows.iter().zip(placed_positions) {
            let d = crate::chem::dist(p, *atom);
            s += row[bins.nearest(d)];
        }
        *w = s;
    }
    LogField::from_unnormalized(grid, weights)
}

/// Brute-force reference: per-cell product of looked-up bin
/// probabilities, normalized by their plain sum. Only suitable for small
/// grids; exists to cross-check the log-space path.
pub fn field_oracle(
    grid: GenerationGrid,
    cfg: &ModelConfig,
    prob_rows: &[Vec<f64>],
    placed_positions: &[[f64; 3]],
) -> Vec<f64> {
    let bins = cfg.label_bins();
    let mut probs = vec![1.0f64; grid.cell_count()];
    for (cell, p) in probs.iter_mut().enumerate() {
        let pos = grid.coords(cell);
        for (row, atom) in prob_rows.iter().zip(placed_positions) {
            *p *= row[bins.nearest(crate::chem::dist(pos, *atom))];
        }
    }
    let z: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= z);
    probs
}

/// Categorical draw over the cells, proportional to exp(field).
pub fn sample_position<RNG: Rng>(field: &LogField, rng: &mut RNG) -> (usize, [f64; 3]) {
    let u: f64 = rng.random_range(0.0..1.0);
    let mut cdf = 0.0;
    for (cell, &w) in field.log_probs().iter().enumerate() {
        cdf += w.exp();
        if u < cdf {
            return (cell, field.grid.coords(cell));
        }
    }
    // numerical tail: fall back to the last cell with nonzero mass
    let cell = field
        .log_probs()
        .iter()
        .rposition(|&w| w > f64::NEG_INFINITY)
        .unwrap_or(field.grid.cell_count() - 1);
    (cell, field.grid.coords(cell))
}

/// One placement step of a finished generation, for trace files.
#[derive(Clone, Debug)]
pub struct TraceStep {
    /// Linear index of the chosen cell.
    pub cell: usize,
    pub position: [f64; 3],
    /// Argmax distance bin of each placed atom's distribution.
    pub argmax_bins: Vec<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct GenTrace {
    pub steps: Vec<TraceStep>,
}

impl GenTrace {
    /// One line per step: index, cell, coordinates, comma-joined bins.
    pub fn to_text(&self) -> String {
        use std::fmt::Write as _;
        let mut s = String::from("step\tcell\tx\ty\tz\targmax_bins\n");
        for (i, step) in self.steps.iter().enumerate() {
            let bins: Vec<String> = step.argmax_bins.iter().map(|b| b.to_string()).collect();
            writeln!(
                s,
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}",
                i + 1,
                step.cell,
                step.position[0],
                step.position[1],
                step.position[2],
                bins.join(",")
            )
            .unwrap();
        }
        s
    }
}

const MAX_REDRAWS: usize = 10;

/// Build a molecule atom by atom. The first atom sits at the grid
/// center; every later one is drawn from its position field. A draw that
/// lands on an occupied cell is rejected and redrawn a bounded number of
/// times.
pub fn generate<R: Real, RNG: Rng>(
    cfg: &ModelConfig,
    store: &ParameterStore<R>,
    plan: &CompositionPlan,
    temperature: f64,
    rng: &mut RNG,
) -> Result<(Molecule, GenTrace), SampleError> {
    let grid = GenerationGrid::from_config(cfg);
    let mut positions: Vec<[f64; 3]> = vec![grid.coords(grid.center_cell())];
    let mut trace = GenTrace::default();

    for i in 1..plan.len() {
        let placed = &plan.charges()[..i];
        let state = PartialState::from_positions(placed.to_vec(), &positions, plan.charges()[i])?;
        let rows = atom_log_rows(cfg, store, &state, temperature)?;
        let field = accumulate_field(grid, cfg, &rows, &positions);

        let mut placed_at = None;
        for _ in 0..MAX_REDRAWS {
            let (cell, pos) = sample_position(&field, rng);
            let occupied = positions.iter().any(|q| crate::chem::dist(*q, pos) < 1e-9);
            if !occupied {
                placed_at = Some((cell, pos));
                break;
            }
        }
        let (cell, pos) = placed_at.ok_or(SampleError::RedrawLimit(MAX_REDRAWS))?;
        positions.push(pos);
        trace.steps.push(TraceStep {
            cell,
            position: pos,
            argmax_bins: rows
                .iter()
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
                        .map(|(i, _)| i)
                        .unwrap()
                })
                .collect(),
        });
    }

    let molecule = Molecule::new(plan.charges().to_vec(), positions)
        .map_err(|e| SampleError::Assembly(e.to_string()))?;
    Ok((molecule, trace))
}

/// Render a composition as a short formula string (heavy atoms in plan
/// order, hydrogens collapsed).
pub fn plan_formula(plan: &CompositionPlan) -> String {
    let mut out = String::new();
    let mut i = 0;
    let charges = plan.charges();
    while i < charges.len() {
        let z = charges[i];
        let mut j = i;
        while j < charges.len() && charges[j] == z {
            j += 1;
        }
        let n = j - i;
        out.push_str(charge_to_symbol(z).unwrap_or("X"));
        if n > 1 {
            out.push_str(&n.to_string());
        }
        i = j;
    }
    out
}
