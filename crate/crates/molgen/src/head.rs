//! Distribution head: maps each placed-atom feature vector independently
//! to a binned distribution over the distance to the next atom.
//!
//! Dense layers of increasing width (F -> 2F -> 4F -> bins) with shifted
//! softplus after the hidden layers and a linear output produce logits;
//! a tempered softmax turns them into probabilities. The same weights
//! apply to every row, so the head commutes with any reordering of the
//! placed atoms.

use thiserror::Error;

use crate::autodiff::{NodeId, Tape};
use crate::bins::DistanceBins;
use crate::config::ModelConfig;
use crate::params::{Init, ParamSpec, ParameterStore, StoreBinding};
use crate::real::Real;

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("temperature must be > 0, got {0}")]
    BadTemperature(f64),
}

/// A binned probability distribution over [0, d_max].
#[derive(Clone, Debug)]
pub struct DistanceDistribution {
    probs: Vec<f64>,
    bins: DistanceBins,
}

impl DistanceDistribution {
    pub fn new(probs: Vec<f64>, bins: DistanceBins) -> Self {
        assert_eq!(probs.len(), bins.count(), "probability vector does not match bin count");
        DistanceDistribution { probs, bins }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn bins(&self) -> &DistanceBins {
        &self.bins
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn argmax(&self) -> usize {
        self.probs
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
            .map(|(i, _)| i)
            .unwrap()
    }

    /// Total mass; 1 within rounding by construction.
    pub fn sum(&self) -> f64 {
        self.probs.iter().sum()
    }
}

pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let f = cfg.features;
    let (h1, h2) = cfg.head_widths();
    let xavier = |fan_in| Init::XavierUniform { fan_in };
    vec![
        ParamSpec::new("head.dense1.w", f, h1, xavier(f)),
        ParamSpec::new("head.dense1.b", 1, h1, Init::Zero),
        ParamSpec::new("head.dense2.w", h1, h2, xavier(h1)),
        ParamSpec::new("head.dense2.b", 1, h2, Init::Zero),
        ParamSpec::new("head.out.w", h2, cfg.bins, xavier(h2)),
        ParamSpec::new("head.out.b", 1, cfg.bins, Init::Zero),
    ]
}

#[derive(Clone, Copy, Debug)]
pub struct HeadBinding {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub w3: NodeId,
    pub b3: NodeId,
}

impl HeadBinding {
    pub fn new<R: Real>(binding: &StoreBinding, store: &ParameterStore<R>) -> Self {
        let id = |name: &str| binding.id(store, name);
        HeadBinding {
            w1: id("head.dense1.w"),
            b1: id("head.dense1.b"),
            w2: id("head.dense2.w"),
            b2: id("head.dense2.b"),
            w3: id("head.out.w"),
            b3: id("head.out.b"),
        }
    }
}

/// Per-atom logits, one row of `bins` values per feature row.
pub fn logits<R: Real>(tape: &mut Tape<R>, bind: &HeadBinding, features: NodeId) -> NodeId {
    let h = crate::encoder::dense(tape, features, bind.w1, bind.b1);
    let h = tape.ssp(h);
    let h = crate::encoder::dense(tape, h, bind.w2, bind.b2);
    let h = tape.ssp(h);
    crate::encoder::dense(tape, h, bind.w3, bind.b3)
}

/// Row-wise tempered softmax of the logits, read off the tape as f64.
pub fn distributions<R: Real>(
    tape: &mut Tape<R>,
    logit_node: NodeId,
    temperature: f64,
    bins: DistanceBins,
) -> Result<Vec<DistanceDistribution>, HeadError> {
    if temperature <= 0.0 {
        return Err(HeadError::BadTemperature(temperature));
    }
    let (rows, cols) = tape.shape(logit_node);
    debug_assert_eq!(cols, bins.count());
    let sm = tape.softmax_rows(logit_node, R::from_f64(temperature));
    let vals = tape.value(sm);
    Ok((0..rows)
        .map(|r| {
            let probs = vals[r * cols..(r + 1) * cols].iter().map(|v| v.as_f64()).collect();
            DistanceDistribution::new(probs, bins)
        })
        .collect())
}

/// Row-wise tempered log-softmax, as f64 rows (used by the sampler).
pub fn log_distributions<R: Real>(
    tape: &mut Tape<R>,
    logit_node: NodeId,
    temperature: f64,
) -> Result<Vec<Vec<f64>>, HeadError> {
    if temperature <= 0.0 {
        return Err(HeadError::BadTemperature(temperature));
    }
    let (rows, cols) = tape.shape(logit_node);
    let lsm = tape.log_softmax_rows(logit_node, R::from_f64(temperature));
    let vals = tape.value(lsm);
    Ok((0..rows)
        .map(|r| vals[r * cols..(r + 1) * cols].iter().map(|v| v.as_f64()).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::params::init_model_params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig { features: 8, blocks: 1, bins: 20, filter_rbf: 12, ..Default::default() }
    }

    fn head_logits_values(
        cfg: &ModelConfig,
        store: &ParameterStore<f64>,
        rows: &[Vec<f64>],
    ) -> Vec<f64> {
        let mut tape: Tape<f64> = Tape::new();
        let sb = StoreBinding::bind(&mut tape, store);
        let bind = HeadBinding::new(&sb, store);
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let feats = tape.leaf(&Tensor::new(rows.len(), cfg.features, flat));
        let out = logits(&mut tape, &bind, feats);
        tape.value(out).to_vec()
    }

    #[test]
    fn duplicated_row_duplicates_logits_exactly() {
        let cfg = cfg();
        let store: ParameterStore<f64> = init_model_params(&cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let row: Vec<f64> = (0..cfg.features).map(|_| rng.random_range(-1.0..1.0)).collect();
        let vals = head_logits_values(&cfg, &store, &[row.clone(), row]);
        assert_eq!(&vals[..cfg.bins], &vals[cfg.bins..]);
    }

    #[test]
    fn zero_parameters_give_zero_logits() {
        let cfg = cfg();
        let mut store: ParameterStore<f64> = init_model_params(&cfg, 4);
        for name in [
            "head.dense1.w",
            "head.dense1.b",
            "head.dense2.w",
            "head.dense2.b",
            "head.out.w",
            "head.out.b",
        ] {
            let idx = store.index_of(name).unwrap();
            store.value_mut(idx).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let vals = head_logits_values(&cfg, &store, &[vec![0.3; cfg.features]]);
        assert!(vals.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batched_rows_match_single_row_application() {
        let cfg = cfg();
        let store: ParameterStore<f64> = init_model_params(&cfg, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..cfg.features).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let batched = head_logits_values(&cfg, &store, &rows);
        for (r, row) in rows.iter().enumerate() {
            let single = head_logits_values(&cfg, &store, std::slice::from_ref(row));
            for c in 0..cfg.bins {
                assert!((batched[r * cfg.bins + c] - single[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_logits_give_uniform_distribution() {
        let cfg = cfg();
        let bins = cfg.label_bins();
        let mut tape: Tape<f64> = Tape::new();
        let l = tape.leaf(&Tensor::from_f64(1, cfg.bins, &vec![0.4; cfg.bins]));
        let dists = distributions(&mut tape, l, 1.0, bins).unwrap();
        for &p in dists[0].probs() {
            assert!((p - 1.0 / cfg.bins as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn low_temperature_concentrates_mass() {
        let bins = DistanceBins::new(300, 15.2420471);
        let mut logit_row = vec![0.0f64; 300];
        logit_row[137] = 1.0;
        let mut tape: Tape<f64> = Tape::new();
        let l = tape.leaf(&Tensor::new(1, 300, logit_row));
        let warm = distributions(&mut tape, l, 1.0, bins).unwrap();
        let cold = distributions(&mut tape, l, 0.01, bins).unwrap();
        assert_eq!(warm[0].argmax(), 137);
        assert_eq!(cold[0].argmax(), 137);
        assert!(warm[0].probs()[137] < 0.01);
        assert!(cold[0].probs()[137] > 0.999);
    }

    #[test]
    fn argmax_is_temperature_independent() {
        let bins = DistanceBins::new(24, 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let row: Vec<f64> = (0..24).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut tape: Tape<f64> = Tape::new();
        let l = tape.leaf(&Tensor::new(1, 24, row));
        let mut seen = std::collections::HashSet::new();
        for t in [0.01, 0.5, 1.0, 10.0, 100.0] {
            let d = distributions(&mut tape, l, t, bins).unwrap();
            seen.insert(d[0].argmax());
        }
        assert_eq!(seen.len(), 1);
    }

    #[test]
    fn rows_sum_to_one_across_temperatures() {
        let cfg = cfg();
        let bins = cfg.label_bins();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..3 * cfg.bins).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut tape: Tape<f64> = Tape::new();
        let l = tape.leaf(&Tensor::new(3, cfg.bins, data));
        for t in [0.01, 1.0, 100.0] {
            for d in distributions(&mut tape, l, t, bins).unwrap() {
                assert!((d.sum() - 1.0).abs() < 1e-6);
                assert!(d.probs().iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn cooling_strictly_increases_peak_mass() {
        let bins = DistanceBins::new(24, 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let row: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape: Tape<f64> = Tape::new();
        let l = tape.leaf(&Tensor::new(1, 24, row));
        let mut prev_peak = 0.0;
        for t in [100.0, 10.0, 1.0, 0.1, 0.01] {
            let d = distributions(&mut tape, l, t, bins).unwrap();
            let peak = d[0].probs()[d[0].argmax()];
            assert!(peak > prev_peak, "peak {peak} not above {prev_peak} at T={t}");
            prev_peak = peak;
        }
    }

    #[test]
    fn rejects_nonpositive_temperature() {
        let bins = DistanceBins::new(10, 5.0);
        let mut tape: Tape<f64> = Tape::new();
        let l = tape.leaf(&Tensor::zeros(1, 10));
        assert!(matches!(
            distributions(&mut tape, l, 0.0, bins),
            Err(HeadError::BadTemperature(_))
        ));
        assert!(matches!(
            distributions(&mut tape, l, -1.0, bins),
            Err(HeadError::BadTemperature(_))
        ));
    }

    #[test]
    fn head_is_pure() {
        let cfg = cfg();
        let store: ParameterStore<f32> = init_model_params(&cfg, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let row: Vec<f64> = (0..cfg.features).map(|_| rng.random_range(-1.0..1.0)).collect();
        let run = || {
            let mut tape: Tape<f32> = Tape::new();
            let sb = StoreBinding::bind(&mut tape, &store);
            let bind = HeadBinding::new(&sb, &store);
            let feats = tape.leaf(&Tensor::from_f64(1, cfg.features, &row));
            let out = logits(&mut tape, &bind, feats);
            tape.value(out).to_vec()
        };
        assert_eq!(run(), run());
    }
}
