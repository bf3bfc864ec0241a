//! Built-in verification suites: finite-difference gradient checking of
//! the full trajectory loss and a brute-force cross-check of the grid
//! probability field. Exposed to users through the `selftest`
//! subcommand; the oracles here never call the code paths they verify.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::chem::{Molecule, OrderedMolecule};
use crate::config::ModelConfig;
use crate::encoder::{encode, EncoderBinding, PartialState};
use crate::head::{logits, HeadBinding};
use crate::loss::{trajectory_loss, trajectory_loss_on_tape, LossError};
use crate::params::{init_model_params, ParameterStore, StoreBinding};
use crate::sampler::{field_oracle, position_log_field, GenerationGrid, SampleError};

/// Central-difference step; near-optimal for f64 losses of order 1..100.
pub const FD_STEP: f64 = 1e-5;

/// Relative-error floor: below this gradient magnitude the comparison is
/// effectively absolute, because central differences carry roundoff noise
/// of about 1e-9 for losses of this scale.
const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Total scalar parameters in the model.
    pub parameters: usize,
    /// Entries actually compared (== parameters unless subsampled).
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
}

/// Compare tape gradients of the trajectory loss against central finite
/// differences, in f64, entry by entry. `stride` > 1 checks every
/// stride-th entry of each parameter (for quick passes).
pub fn gradient_check(
    cfg: &ModelConfig,
    om: &OrderedMolecule,
    seed: u64,
    stride: usize,
) -> Result<GradCheckReport, LossError> {
    let stride = stride.max(1);
    let mut store: ParameterStore<f64> = init_model_params(cfg, seed);

    let mut tape: Tape<f64> = Tape::new();
    let sb = StoreBinding::bind(&mut tape, &store);
    let enc = EncoderBinding::new(&sb, &store, cfg);
    let head = HeadBinding::new(&sb, &store);
    let (loss_node, _) = trajectory_loss_on_tape(&mut tape, &enc, &head, cfg, om, None, 1.0)?;
    tape.backward(loss_node);
    sb.harvest(&tape, &mut store);

    let mut report = GradCheckReport {
        parameters: store.num_scalars(),
        checked: 0,
        max_rel_err: 0.0,
        worst_param: String::new(),
    };
    for idx in 0..store.len() {
        let n = store.value(idx).numel();
        for e in (0..n).step_by(stride) {
            let orig = store.value(idx).data()[e];
            store.value_mut(idx).data_mut()[e] = orig + FD_STEP;
            let fp = trajectory_loss(cfg, &store, om, None, 1.0)?.total;
            store.value_mut(idx).data_mut()[e] = orig - FD_STEP;
            let fm = trajectory_loss(cfg, &store, om, None, 1.0)?.total;
            store.value_mut(idx).data_mut()[e] = orig;
            let fd = (fp - fm) / (2.0 * FD_STEP);
            let an = store.grad(idx)[e];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(REL_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = format!("{}[{}]", store.name(idx), e);
            }
        }
    }
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct FieldCheckReport {
    pub cells: usize,
    pub states: usize,
    pub max_rel_err: f64,
}

/// Compare the log-space position field against a naive per-cell
/// product-and-normalize oracle on a reduced grid, for 1..=3 placed
/// atoms. Both routes start from the same model logits; the oracle does
/// its own softmax in plain f64.
pub fn sampler_oracle_check(seed: u64) -> Result<FieldCheckReport, SampleError> {
    let cfg = ModelConfig {
        features: 16,
        blocks: 2,
        bins: 300,
        filter_rbf: 32,
        grid_extent: 4.4,
        grid_steps: 10,
    };
    let store: ParameterStore<f64> = init_model_params(&cfg, seed);
    let grid = GenerationGrid::from_config(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);

    let mut report = FieldCheckReport { cells: grid.cell_count(), states: 0, max_rel_err: 0.0 };
    for n_placed in 1..=3usize {
        let charges: Vec<u8> = (0..n_placed).map(|i| [6u8, 8, 7][i % 3]).collect();
        let positions: Vec<[f64; 3]> = (0..n_placed)
            .map(|i| {
                [
                    i as f64 * 1.5 - 1.5 + rng.random_range(-0.3..0.3),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        let next = 1u8;
        let field = position_log_field(&cfg, &store, &charges, &positions, next, 1.0)?;

        // independent route: raw logits -> plain softmax -> product oracle
        let state = PartialState::from_positions(charges.clone(), &positions, next)?;
        let mut tape: Tape<f64> = Tape::new();
        let sb = StoreBinding::bind(&mut tape, &store);
        let enc = EncoderBinding::new(&sb, &store, &cfg);
        let headb = HeadBinding::new(&sb, &store);
        let feats = encode(&mut tape, &enc, &cfg, &state);
        let y = logits(&mut tape, &headb, feats);
        let (rows, cols) = tape.shape(y);
        let prob_rows: Vec<Vec<f64>> = (0..rows)
            .map(|r| {
                let row = &tape.value(y)[r * cols..(r + 1) * cols];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                exps.iter().map(|e| e / z).collect()
            })
            .collect();
        let oracle = field_oracle(grid, &cfg, &prob_rows, &positions);

        report.states += 1;
        for (cell, &expect) in oracle.iter().enumerate() {
            let got = field.log_probs()[cell].exp();
            let rel = (got - expect).abs() / expect.abs().max(1e-300);
            report.max_rel_err = report.max_rel_err.max(rel);
        }
    }
    Ok(report)
}

/// A 3-atom toy molecule with a hydrogen placed last.
pub fn toy_molecule() -> OrderedMolecule {
    let mol = Molecule::new(vec![6, 7, 1], vec![[0.0; 3], [1.156, 0.0, 0.0], [-1.064, 0.0, 0.0]])
        .unwrap();
    OrderedMolecule::stable(mol)
}

/// Run both suites, printing one line per check. Returns overall success.
pub fn run_all(grad_stride: usize) -> bool {
    let mut ok = true;

    let cfg =
        ModelConfig { features: 16, blocks: 9, bins: 48, filter_rbf: 32, ..Default::default() };
    match gradient_check(&cfg, &toy_molecule(), 7, grad_stride) {
        Ok(r) => {
            let pass = r.max_rel_err < 1e-4;
            ok &= pass;
            println!(
                "gradient-check: {} ({} of {} entries, max rel err {:.3e} at {})",
                if pass { "PASS" } else { "FAIL" },
                r.checked,
                r.parameters,
                r.max_rel_err,
                r.worst_param
            );
        }
        Err(e) => {
            ok = false;
            println!("gradient-check: ERROR {e}");
        }
    }

    match sampler_oracle_check(11) {
        Ok(r) => {
            let pass = r.max_rel_err < 1e-8;
            ok &= pass;
            println!(
                "sampler-oracle: {} ({} states on {} cells, max rel err {:.3e})",
                if pass { "PASS" } else { "FAIL" },
                r.states,
                r.cells,
                r.max_rel_err
            );
        }
        Err(e) => {
            ok = false;
            println!("sampler-oracle: ERROR {e}");
        }
    }
    ok
}
