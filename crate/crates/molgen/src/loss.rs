//! Smoothed target distributions and the cross-entropy training loss.
//!
//! A true distance becomes a normalized Gaussian bump over the shared
//! distance bins; the training loss for one molecule sums the
//! cross-entropy between every such target and the model's prediction
//! across the whole placement trajectory (teacher forcing: prefixes use
//! the true geometry). Cross-entropy against the model is always computed
//! from logits through log-softmax, so finite logits can never produce
//! infinities.

use thiserror::Error;

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::bins::DistanceBins;
use crate::chem::{Molecule, OrderedMolecule};
use crate::config::ModelConfig;
use crate::encoder::{encode, EncodeError, EncoderBinding, PartialState};
use crate::head::{logits, DistanceDistribution, HeadBinding, HeadError};
use crate::params::{ParameterStore, StoreBinding};
use crate::real::Real;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("distance must be non-negative, got {0}")]
    NegativeDistance(f64),
    #[error("trajectory loss needs at least 2 atoms, got {0}")]
    TooFewAtoms(usize),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Head(#[from] HeadError),
}

/// Normalized Gaussian bump peaked at the bin nearest the true distance.
#[derive(Clone, Debug)]
pub struct TargetDistribution {
    q: Vec<f64>,
    bins: DistanceBins,
}

impl TargetDistribution {
    /// Wrap an explicit probability vector (must be normalized).
    pub fn new(q: Vec<f64>, bins: DistanceBins) -> Self {
        assert_eq!(q.len(), bins.count());
        let sum: f64 = q.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9, "target distribution sums to {sum}");
        TargetDistribution { q, bins }
    }

    pub fn probs(&self) -> &[f64] {
        &self.q
    }

    pub fn bins(&self) -> &DistanceBins {
        &self.bins
    }

    pub fn argmax(&self) -> usize {
        self.q
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
            .map(|(i, _)| i)
            .unwrap()
    }
}

/// Expand a true distance into a normalized target over the bins.
/// Distances above d_max are clamped (with a warning); they cannot occur
/// for data inside the generation cube.
pub fn make_target(d: f64, bins: DistanceBins) -> Result<TargetDistribution, LossError> {
    if d < 0.0 {
        return Err(LossError::NegativeDistance(d));
    }
    let d = if d > bins.d_max() {
        log::warn!("distance {d:.4} A exceeds d_max {:.4} A; clamping", bins.d_max());
        bins.d_max()
    } else {
        d
    };
    let mut q = bins.expand(d);
    let sum: f64 = q.iter().sum();
    for v in &mut q {
        *v /= sum;
    }
    Ok(TargetDistribution { q, bins })
}

/// Shannon entropy in nats; zero-probability bins contribute nothing.
pub fn entropy(probs: &[f64]) -> f64 {
    probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

/// Direct-sum cross-entropy H(q, p) = -sum q_c ln p_c.
pub fn cross_entropy(q: &TargetDistribution, p: &DistanceDistribution) -> f64 {
    assert_eq!(q.probs().len(), p.probs().len());
    q.probs()
        .iter()
        .zip(p.probs())
        .filter(|(&qc, _)| qc > 0.0)
        .map(|(&qc, &pc)| -qc * pc.ln())
        .sum()
}

/// Cross-entropy computed from raw logits via log-softmax; finite for
/// any finite logits even where the softmax would underflow to zero.
pub fn cross_entropy_from_logits(logit_row: &[f64], temperature: f64, q: &[f64]) -> f64 {
    assert_eq!(logit_row.len(), q.len());
    let inv_t = 1.0 / temperature;
    let max = logit_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = logit_row.iter().map(|&y| ((y - max) * inv_t).exp()).sum::<f64>().ln();
    q.iter().zip(logit_row).map(|(&qc, &y)| -qc * ((y - max) * inv_t - log_z)).sum()
}

/// The loss of one placement trajectory plus its per-step breakdown.
#[derive(Clone, Debug)]
pub struct TrajectoryLoss {
    /// Sum of all cross-entropy terms, in nats.
    pub total: f64,
    /// Sum over placed atoms of the cross-entropy at each step.
    pub per_step: Vec<f64>,
    /// Number of cross-entropy terms that contributed.
    pub terms: usize,
}

/// Build the trajectory loss for one ordered molecule on an existing
/// tape. Steps whose mask entry is false contribute exactly zero and do
/// not appear on the tape at all.
pub fn trajectory_loss_on_tape<R: Real>(
    tape: &mut Tape<R>,
    enc: &EncoderBinding,
    head: &HeadBinding,
    cfg: &ModelConfig,
    om: &OrderedMolecule,
    mask: Option<&[bool]>,
    temperature: f64,
) -> Result<(NodeId, TrajectoryLoss), LossError> {
    let n = om.len();
    if n < 2 {
        return Err(LossError::TooFewAtoms(n));
    }
    if let Some(m) = mask {
        assert!(m.len() >= n - 1, "mask covers {} steps, molecule needs {}", m.len(), n - 1);
    }
    let bins = cfg.label_bins();
    let dm = om.distance_matrix();
    let t = R::from_f64(temperature);

    let mut total_node: Option<NodeId> = None;
    let mut per_step = Vec::with_capacity(n - 1);
    let mut terms = 0usize;
    for i in 1..n {
        if let Some(m) = mask {
            if !m[i - 1] {
                per_step.push(0.0);
                continue;
            }
        }
        let state = PartialState::new(om.charges()[..i].to_vec(), dm.prefix(i), om.charges()[i])?;
        let feats = encode(tape, enc, cfg, &state);
        let y = logits(tape, head, feats);
        let log_p = tape.log_softmax_rows(y, t);

        let mut q_flat = Vec::with_capacity(i * bins.count());
        for j in 0..i {
            let target = make_target(dm.get(i, j), bins)?;
            q_flat.extend(target.probs().iter().map(|&v| R::from_f64(v)));
        }
        let q_node = tape.leaf(&Tensor::new(i, bins.count(), q_flat));
        let weighted = tape.mul(log_p, q_node);
        let summed = tape.sum(weighted);
        let step_loss = tape.scale(summed, -R::one());

        per_step.push(tape.scalar_value(step_loss).as_f64());
        terms += i;
        total_node = Some(match total_node {
            None => step_loss,
            Some(acc) => tape.add(acc, step_loss),
        });
    }
    let total_node = match total_node {
        Some(id) => id,
        // Fully masked molecule: a constant zero keeps the contract that
        // masked entries contribute exactly nothing.
        None => tape.leaf(&Tensor::scalar(R::zero())),
    };
    let total = tape.scalar_value(total_node).as_f64();
    Ok((total_node, TrajectoryLoss { total, per_step, terms }))
}

/// Forward-only trajectory loss on a fresh tape (finite-difference
/// oracles and held-out evaluation).
pub fn trajectory_loss<R: Real>(
    cfg: &ModelConfig,
    store: &ParameterStore<R>,
    om: &OrderedMolecule,
    mask: Option<&[bool]>,
    temperature: f64,
) -> Result<TrajectoryLoss, LossError> {
    let mut tape: Tape<R> = Tape::new();
    let sb = StoreBinding::bind(&mut tape, store);
    let enc = EncoderBinding::new(&sb, store, cfg);
    let head = HeadBinding::new(&sb, store);
    let (_, loss) = trajectory_loss_on_tape(&mut tape, &enc, &head, cfg, om, mask, temperature)?;
    Ok(loss)
}

/// Analytic lower bound of the trajectory loss: the targets' entropies.
/// Every unordered atom pair contributes exactly one term regardless of
/// placement order, so the floor needs no ordering.
pub fn entropy_floor(mol: &Molecule, bins: DistanceBins) -> Result<(f64, usize), LossError> {
    let dm = crate::chem::distance_matrix(mol);
    let n = mol.len();
    let mut floor = 0.0;
    let mut terms = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            floor += entropy(make_target(dm.get(i, j), bins)?.probs());
            terms += 1;
        }
    }
    Ok((floor, terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chem::{apply_rigid, random_rotation};
    use crate::params::init_model_params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn full_range_bins() -> DistanceBins {
        DistanceBins::new(300, (3.0f64 * 8.8 * 8.8).sqrt())
    }

    #[test]
    fn target_peaks_at_nearest_center_and_is_symmetric() {
        let bins = full_range_bins();
        let d = bins.center(150);
        let t = make_target(d, bins).unwrap();
        assert_eq!(t.argmax(), 150);
        assert!((t.probs()[149] - t.probs()[151]).abs() < 1e-12);
        let sum: f64 = t.probs().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn target_at_zero_peaks_at_first_bin() {
        let t = make_target(0.0, full_range_bins()).unwrap();
        assert_eq!(t.argmax(), 0);
    }

    #[test]
    fn full_scale_spacing_and_gamma() {
        let bins = full_range_bins();
        assert!((bins.d_max() - 15.2420).abs() < 1e-4);
        assert!((bins.spacing() - 0.050977).abs() < 1e-6);
        assert!((bins.gamma() - 19.617).abs() < 1e-3);
    }

    #[test]
    fn negative_distance_rejected_and_overlong_clamped() {
        let bins = full_range_bins();
        assert!(matches!(make_target(-0.5, bins), Err(LossError::NegativeDistance(_))));
        let t = make_target(99.0, bins).unwrap();
        assert_eq!(t.argmax(), 299);
    }

    #[test]
    fn one_hot_against_uniform_is_log_300() {
        let bins = full_range_bins();
        let mut q = vec![0.0; 300];
        q[42] = 1.0;
        let q = TargetDistribution::new(q, bins);
        let p = DistanceDistribution::new(vec![1.0 / 300.0; 300], bins);
        let h = cross_entropy(&q, &p);
        assert!((h - 5.703782).abs() < 1e-6, "H = {h}");
        assert!((h - (300.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn gibbs_inequality() {
        let bins = full_range_bins();
        let q = make_target(1.9, bins).unwrap();
        let p_equal = DistanceDistribution::new(q.probs().to_vec(), bins);
        let h_equal = cross_entropy(&q, &p_equal);
        assert!((h_equal - entropy(q.probs())).abs() < 1e-12);

        // any perturbation increases the cross-entropy
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let mut p: Vec<f64> =
                q.probs().iter().map(|&v| (v + rng.random_range(0.0..0.01)).max(1e-300)).collect();
            let s: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= s);
            let h = cross_entropy(&q, &DistanceDistribution::new(p, bins));
            assert!(h >= h_equal - 1e-12);
        }
    }

    #[test]
    fn logit_route_matches_direct_sum_oracle() {
        let bins = DistanceBins::new(50, 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let logit_row: Vec<f64> = (0..50).map(|_| rng.random_range(-4.0..4.0)).collect();
            let q = make_target(rng.random_range(0.0..10.0), bins).unwrap();
            for t in [0.5, 1.0, 2.0] {
                // naive oracle: softmax then direct sum, all in f64
                let max = logit_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logit_row.iter().map(|&y| ((y - max) / t).exp()).collect();
                let z: f64 = exps.iter().sum();
                let p = DistanceDistribution::new(exps.iter().map(|e| e / z).collect(), bins);
                let direct = cross_entropy(&q, &p);
                let guarded = cross_entropy_from_logits(&logit_row, t, q.probs());
                assert!((direct - guarded).abs() < 1e-8, "{direct} vs {guarded}");
            }
        }
    }

    fn toy_molecule(n: usize) -> OrderedMolecule {
        let charges: Vec<u8> = (0..n).map(|i| if i % 2 == 0 { 6 } else { 8 }).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let positions: Vec<[f64; 3]> = (0..n)
            .map(|i| [i as f64 * 1.3, rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)])
            .collect();
        OrderedMolecule::stable(Molecule::new(charges, positions).unwrap())
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig { features: 8, blocks: 2, bins: 32, filter_rbf: 16, ..Default::default() }
    }

    #[test]
    fn term_counts_follow_pair_formula() {
        let cfg = small_cfg();
        let store: ParameterStore<f64> = init_model_params(&cfg, 1);
        let two = trajectory_loss(&cfg, &store, &toy_molecule(2), None, 1.0).unwrap();
        assert_eq!(two.terms, 1);
        assert_eq!(two.per_step.len(), 1);
        let four = trajectory_loss(&cfg, &store, &toy_molecule(4), None, 1.0).unwrap();
        assert_eq!(four.terms, 6);
        assert_eq!(four.per_step.len(), 3);
    }

    #[test]
    fn single_atom_rejected() {
        let cfg = small_cfg();
        let store: ParameterStore<f64> = init_model_params(&cfg, 1);
        let m = OrderedMolecule::stable(Molecule::new(vec![6], vec![[0.0; 3]]).unwrap());
        assert!(matches!(
            trajectory_loss(&cfg, &store, &m, None, 1.0),
            Err(LossError::TooFewAtoms(1))
        ));
    }

    #[test]
    fn loss_invariant_under_rigid_motion() {
        let cfg = small_cfg();
        let store: ParameterStore<f64> = init_model_params(&cfg, 2);
        let om = toy_molecule(4);
        let base = trajectory_loss(&cfg, &store, &om, None, 1.0).unwrap().total;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..5 {
            let rot = random_rotation(&mut rng);
            let moved = apply_rigid(om.molecule(), &rot, [1.0, -2.0, 0.5]);
            let om2 = OrderedMolecule::new(moved, om.permutation().to_vec()).unwrap();
            let total = trajectory_loss(&cfg, &store, &om2, None, 1.0).unwrap().total;
            assert!((total - base).abs() < 1e-10, "{total} vs {base}");
        }
    }

    #[test]
    fn masked_steps_contribute_exactly_zero() {
        let cfg = small_cfg();
        let store: ParameterStore<f64> = init_model_params(&cfg, 3);
        let om = toy_molecule(4);
        let full = trajectory_loss(&cfg, &store, &om, None, 1.0).unwrap();
        let masked = trajectory_loss(&cfg, &store, &om, Some(&[true, false, true]), 1.0).unwrap();
        assert_eq!(masked.per_step[1], 0.0);
        assert_eq!(masked.terms, 1 + 3);
        let expect = full.per_step[0] + full.per_step[2];
        assert!((masked.total - expect).abs() < 1e-12);

        let all_masked =
            trajectory_loss(&cfg, &store, &om, Some(&[false, false, false]), 1.0).unwrap();
        assert_eq!(all_masked.total, 0.0);
        assert_eq!(all_masked.terms, 0);
    }

    #[test]
    fn loss_dominates_entropy_floor_with_kl_gap() {
        let cfg = small_cfg();
        let store: ParameterStore<f64> = init_model_params(&cfg, 4);
        let om = toy_molecule(4);
        let loss = trajectory_loss(&cfg, &store, &om, None, 1.0).unwrap();
        let (floor, terms) = entropy_floor(om.molecule(), cfg.label_bins()).unwrap();
        assert_eq!(terms, loss.terms);
        assert!(loss.total >= floor - 1e-9, "loss {} below floor {floor}", loss.total);

        // the gap equals the summed KL divergences, reassembled numerically
        let bins = cfg.label_bins();
        let dm = om.distance_matrix();
        let mut kl_sum = 0.0;
        for i in 1..om.len() {
            let state =
                PartialState::new(om.charges()[..i].to_vec(), dm.prefix(i), om.charges()[i])
                    .unwrap();
            let mut tape: Tape<f64> = Tape::new();
            let sb = StoreBinding::bind(&mut tape, &store);
            let enc = EncoderBinding::new(&sb, &store, &cfg);
            let head = HeadBinding::new(&sb, &store);
            let feats = encode(&mut tape, &enc, &cfg, &state);
            let y = logits(&mut tape, &head, feats);
            let dists = crate::head::distributions(&mut tape, y, 1.0, bins).unwrap();
            for (j, p) in dists.iter().enumerate() {
                let q = make_target(dm.get(i, j), bins).unwrap();
                kl_sum += q
                    .probs()
                    .iter()
                    .zip(p.probs())
                    .filter(|(&qc, _)| qc > 0.0)
                    .map(|(&qc, &pc)| qc * (qc / pc).ln())
                    .sum::<f64>();
            }
        }
        assert!((loss.total - floor - kl_sum).abs() < 1e-6);
    }

    #[test]
    fn gradients_match_finite_differences_on_toy_molecule() {
        // reduced-width smoke version; the acceptance suite runs the full sweep
        let cfg =
            ModelConfig { features: 4, blocks: 1, bins: 12, filter_rbf: 8, ..Default::default() };
        let mut store: ParameterStore<f64> = init_model_params(&cfg, 5);
        let om = toy_molecule(3);

        let mut tape: Tape<f64> = Tape::new();
        let sb = StoreBinding::bind(&mut tape, &store);
        let enc = EncoderBinding::new(&sb, &store, &cfg);
        let head = HeadBinding::new(&sb, &store);
        let (loss_node, _) =
            trajectory_loss_on_tape(&mut tape, &enc, &head, &cfg, &om, None, 1.0).unwrap();
        tape.backward(loss_node);
        sb.harvest(&tape, &mut store);

        let h = 1e-5;
        let mut worst = 0.0f64;
        for idx in 0..store.len() {
            for e in 0..store.value(idx).numel() {
                let orig = store.value(idx).data()[e];
                store.value_mut(idx).data_mut()[e] = orig + h;
                let fp = trajectory_loss(&cfg, &store, &om, None, 1.0).unwrap().total;
                store.value_mut(idx).data_mut()[e] = orig - h;
                let fm = trajectory_loss(&cfg, &store, &om, None, 1.0).unwrap().total;
                store.value_mut(idx).data_mut()[e] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let an = store.grad(idx)[e];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-4);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4, "max relative gradient error {worst}");
    }
}
