//! Mini-batch training with bias-corrected first/second-moment updates,
//! checkpointing, and periodic generation-based validation.
//!
//! Checkpoints are a plain-text manifest (format version, dtype, step,
//! optimizer hyperparameters, RNG state, array directory) followed by the
//! raw little-endian arrays in manifest order, so a write/read/write
//! round trip is byte-identical.

use std::io::Write as IoWrite;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::analysis::{
    infer_bonds, matching_key, valence_check, CanonicalKey, DEFAULT_BOND_TOLERANCE,
};
use crate::autodiff::{Tape, Tensor};
use crate::chem::{randomize_order, Batch, Molecule, OrderedMolecule};
use crate::config::ModelConfig;
use crate::encoder::EncoderBinding;
use crate::head::HeadBinding;
use crate::loss::{trajectory_loss, trajectory_loss_on_tape, LossError};
use crate::params::{ParameterStore, StoreBinding};
use crate::real::Real;
use crate::sampler::{generate, CompositionPlan, SampleError};

pub const CHECKPOINT_MAGIC: &str = "molgen-checkpoint v1";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("missing gradient for trainable parameter {0:?}")]
    MissingGradient(String),
    #[error("non-finite loss at iteration {iter}; diagnostic checkpoint: {diagnostic}")]
    NonFiniteLoss { iter: u64, diagnostic: String },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint is {found}, expected {expected}")]
    DtypeMismatch { found: String, expected: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Sample(#[from] SampleError),
}

// ── optimizer ───────────────────────────────────────────────────────

/// First/second moment buffers per parameter plus the shared step
/// counter; hyperparameters fixed at the standard defaults.
#[derive(Clone, Debug)]
pub struct AdamState<R: Real> {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<R>>,
    v: Vec<Vec<R>>,
}

impl<R: Real> AdamState<R> {
    pub fn new(store: &ParameterStore<R>) -> Self {
        AdamState {
            alpha: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: (0..store.len()).map(|i| vec![R::zero(); store.value(i).numel()]).collect(),
            v: (0..store.len()).map(|i| vec![R::zero(); store.value(i).numel()]).collect(),
        }
    }

    pub fn moments(&self, idx: usize) -> (&[R], &[R]) {
        (&self.m[idx], &self.v[idx])
    }
}

/// One bias-corrected update over every parameter, consuming the
/// accumulated gradients in place.
pub fn adam_step<R: Real>(
    store: &mut ParameterStore<R>,
    state: &mut AdamState<R>,
) -> Result<(), TrainError> {
    for idx in 0..store.len() {
        if !store.grad_seen(idx) {
            return Err(TrainError::MissingGradient(store.name(idx).to_string()));
        }
    }
    state.t += 1;
    let b1 = R::from_f64(state.beta1);
    let b2 = R::from_f64(state.beta2);
    let one = R::one();
    let bc1 = one - b1.powi(state.t as i32);
    let bc2 = one - b2.powi(state.t as i32);
    let alpha = R::from_f64(state.alpha);
    let eps = R::from_f64(state.eps);
    for idx in 0..store.len() {
        let grads = store.grad(idx).to_vec();
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let data = store.value_mut(idx).data_mut();
        for e in 0..data.len() {
            let g = grads[e];
            m[e] = b1 * m[e] + (one - b1) * g;
            v[e] = b2 * v[e] + (one - b2) * g * g;
            let m_hat = m[e] / bc1;
            let v_hat = v[e] / bc2;
            data[e] -= alpha * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

// ── RNG state capture ───────────────────────────────────────────────

/// Enough state to restart the training stream bit-exactly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), word_pos: rng.get_word_pos(), stream: rng.get_stream() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hex_decode(s: &str) -> Result<Vec<u8>, TrainError> {
    if !s.len().is_multiple_of(2) {
        return Err(TrainError::Format("odd-length hex string".into()));
    }
    (0..s.len() / 2)
        .map(|i| {
            u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
                .map_err(|_| TrainError::Format(format!("bad hex {s:?}")))
        })
        .collect()
}

// ── checkpoints ─────────────────────────────────────────────────────

pub struct Checkpoint<R: Real> {
    pub store: ParameterStore<R>,
    pub adam: AdamState<R>,
    pub step: u64,
    pub rng: RngState,
}

pub fn save_checkpoint<R: Real>(
    path: &Path,
    store: &ParameterStore<R>,
    adam: &AdamState<R>,
    step: u64,
    rng: &RngState,
) -> Result<(), TrainError> {
    let mut manifest = String::new();
    let mut blob: Vec<u8> = Vec::new();
    use std::fmt::Write as _;
    writeln!(manifest, "{CHECKPOINT_MAGIC}").unwrap();
    writeln!(manifest, "dtype {}", R::DTYPE).unwrap();
    writeln!(manifest, "step {step}").unwrap();
    writeln!(
        manifest,
        "adam t {} alpha {} beta1 {} beta2 {} eps {}",
        adam.t, adam.alpha, adam.beta1, adam.beta2, adam.eps
    )
    .unwrap();
    writeln!(
        manifest,
        "rng seed {} word_pos {} stream {}",
        hex_encode(&rng.seed),
        rng.word_pos,
        rng.stream
    )
    .unwrap();
    writeln!(manifest, "arrays {}", 3 * store.len()).unwrap();
    let mut write_array = |kind: &str, name: &str, rows: usize, cols: usize, data: &[R]| {
        let offset = blob.len();
        for &x in data {
            x.write_le(&mut blob);
        }
        format!("array {kind} {name} {rows} {cols} {offset}\n")
    };
    let mut lines = String::new();
    for idx in 0..store.len() {
        let t = store.value(idx);
        lines += &write_array("param", store.name(idx), t.rows(), t.cols(), t.data());
    }
    for idx in 0..store.len() {
        let t = store.value(idx);
        let (m, _) = adam.moments(idx);
        lines += &write_array("adam_m", store.name(idx), t.rows(), t.cols(), m);
    }
    for idx in 0..store.len() {
        let t = store.value(idx);
        let (_, v) = adam.moments(idx);
        lines += &write_array("adam_v", store.name(idx), t.rows(), t.cols(), v);
    }
    manifest.push_str(&lines);
    manifest.push_str("end\n");

    let mut bytes = manifest.into_bytes();
    bytes.extend_from_slice(&blob);
    std::fs::write(path, bytes)
        .map_err(|source| TrainError::Io { path: path.display().to_string(), source })
}

pub fn load_checkpoint<R: Real>(path: &Path) -> Result<Checkpoint<R>, TrainError> {
    let bytes = std::fs::read(path)
        .map_err(|source| TrainError::Io { path: path.display().to_string(), source })?;
    // match the marker as a whole line so a name ending in "end" can
    // never terminate the manifest early
    let end_marker = b"\nend\n";
    let end = bytes
        .windows(end_marker.len())
        .position(|w| w == end_marker)
        .ok_or_else(|| TrainError::Format("missing end marker".into()))?;
    let manifest = std::str::from_utf8(&bytes[..end + end_marker.len()])
        .map_err(|_| TrainError::Format("manifest is not utf-8".into()))?;
    let blob = &bytes[end + end_marker.len()..];

    let mut lines = manifest.lines();
    let magic = lines.next().unwrap_or("");
    if magic != CHECKPOINT_MAGIC {
        return Err(TrainError::Format(format!("unrecognized header {magic:?}")));
    }
    let field = |line: &str, key: &str| -> Result<String, TrainError> {
        line.strip_prefix(key)
            .map(|s| s.trim().to_string())
            .ok_or_else(|| TrainError::Format(format!("expected {key:?} line, got {line:?}")))
    };
    let dtype = field(lines.next().unwrap_or(""), "dtype")?;
    if dtype != R::DTYPE {
        return Err(TrainError::DtypeMismatch { found: dtype, expected: R::DTYPE.into() });
    }
    let step: u64 = field(lines.next().unwrap_or(""), "step")?
        .parse()
        .map_err(|_| TrainError::Format("bad step".into()))?;

    let adam_line = field(lines.next().unwrap_or(""), "adam")?;
    let toks: Vec<&str> = adam_line.split_whitespace().collect();
    let kv = |key: &str| -> Result<f64, TrainError> {
        toks.iter()
            .position(|&t| t == key)
            .and_then(|i| toks.get(i + 1))
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| TrainError::Format(format!("bad adam field {key}")))
    };
    let adam_t = kv("t")? as u64;
    let (alpha, beta1, beta2, eps) = (kv("alpha")?, kv("beta1")?, kv("beta2")?, kv("eps")?);

    let rng_line = field(lines.next().unwrap_or(""), "rng")?;
    let rtoks: Vec<&str> = rng_line.split_whitespace().collect();
    let rfield = |key: &str| -> Result<String, TrainError> {
        rtoks
            .iter()
            .position(|&t| t == key)
            .and_then(|i| rtoks.get(i + 1))
            .map(|s| s.to_string())
            .ok_or_else(|| TrainError::Format(format!("bad rng field {key}")))
    };
    let seed_vec = hex_decode(&rfield("seed")?)?;
    let seed: [u8; 32] =
        seed_vec.try_into().map_err(|_| TrainError::Format("rng seed must be 32 bytes".into()))?;
    let word_pos: u128 =
        rfield("word_pos")?.parse().map_err(|_| TrainError::Format("bad word_pos".into()))?;
    let stream: u64 =
        rfield("stream")?.parse().map_err(|_| TrainError::Format("bad stream".into()))?;

    let n_arrays: usize = field(lines.next().unwrap_or(""), "arrays")?
        .parse()
        .map_err(|_| TrainError::Format("bad array count".into()))?;

    let mut store = ParameterStore::<R>::empty();
    let mut m_bufs: Vec<Vec<R>> = Vec::new();
    let mut v_bufs: Vec<Vec<R>> = Vec::new();
    for _ in 0..n_arrays {
        let line = lines.next().unwrap_or("");
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 6 || toks[0] != "array" {
            return Err(TrainError::Format(format!("bad array line {line:?}")));
        }
        let (kind, name) = (toks[1], toks[2]);
        let rows: usize = toks[3].parse().map_err(|_| TrainError::Format("bad rows".into()))?;
        let cols: usize = toks[4].parse().map_err(|_| TrainError::Format("bad cols".into()))?;
        let offset: usize = toks[5].parse().map_err(|_| TrainError::Format("bad offset".into()))?;
        let n = rows * cols;
        let end = offset + n * R::BYTES;
        if end > blob.len() {
            return Err(TrainError::Format(format!("array {name} overruns binary section")));
        }
        let data: Vec<R> = (0..n).map(|i| R::read_le(&blob[offset + i * R::BYTES..])).collect();
        match kind {
            "param" => store.add(name, Tensor::new(rows, cols, data)),
            "adam_m" => m_bufs.push(data),
            "adam_v" => v_bufs.push(data),
            other => return Err(TrainError::Format(format!("unknown array kind {other:?}"))),
        }
    }
    if m_bufs.len() != store.len() || v_bufs.len() != store.len() {
        return Err(TrainError::Format("moment arrays do not match parameters".into()));
    }
    let mut adam = AdamState::new(&store);
    adam.t = adam_t;
    adam.alpha = alpha;
    adam.beta1 = beta1;
    adam.beta2 = beta2;
    adam.eps = eps;
    adam.m = m_bufs;
    adam.v = v_bufs;

    Ok(Checkpoint { store, adam, step, rng: RngState { seed, word_pos, stream } })
}

// ── training ────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: u64,
    pub val_interval: u64,
    pub val_samples: usize,
    pub seed: u64,
    pub t_train: f64,
    pub t_val: f64,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 20,
            iterations: 10_000,
            val_interval: 1000,
            val_samples: 50,
            seed: 0,
            t_train: 1.0,
            t_val: 0.01,
            threads: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub iterations_run: u64,
    pub final_loss: f64,
    pub final_terms: usize,
}

/// Per-store-entry gradients harvested from one tape.
type GradSet<R> = Vec<Option<Vec<R>>>;

/// Loss and per-entry gradients of one ordered molecule on its own tape.
fn molecule_grads<R: Real>(
    model: &ModelConfig,
    store: &ParameterStore<R>,
    om: &OrderedMolecule,
    mask: &[bool],
    temperature: f64,
) -> Result<(f64, usize, GradSet<R>), LossError> {
    let mut tape: Tape<R> = Tape::new();
    let sb = StoreBinding::bind(&mut tape, store);
    let enc = EncoderBinding::new(&sb, store, model);
    let head = HeadBinding::new(&sb, store);
    let (loss_node, loss) =
        trajectory_loss_on_tape(&mut tape, &enc, &head, model, om, Some(mask), temperature)?;
    tape.backward(loss_node);
    Ok((loss.total, loss.terms, sb.collect(&tape)))
}

/// Gradients of a whole batch, accumulated into the store in batch order
/// regardless of thread count, so results are bit-identical for any
/// `threads` value.
fn batch_grads<R: Real>(
    model: &ModelConfig,
    store: &mut ParameterStore<R>,
    batch: &Batch,
    temperature: f64,
    threads: usize,
) -> Result<(f64, usize), TrainError> {
    type MolResult<R> = Result<(f64, usize, GradSet<R>), LossError>;
    let n = batch.len();
    let mut results: Vec<Option<MolResult<R>>> = (0..n).map(|_| None).collect();
    let workers = threads.clamp(1, n.max(1));
    if workers <= 1 {
        for (i, slot) in results.iter_mut().enumerate() {
            *slot = Some(molecule_grads(
                model,
                store,
                &batch.molecules()[i],
                batch.mask(i),
                temperature,
            ));
        }
    } else {
        let per = n.div_ceil(workers);
        let shared: &ParameterStore<R> = store;
        std::thread::scope(|scope| {
            for (k, chunk) in results.chunks_mut(per).enumerate() {
                scope.spawn(move || {
                    for (off, slot) in chunk.iter_mut().enumerate() {
                        let i = k * per + off;
                        *slot = Some(molecule_grads(
                            model,
                            shared,
                            &batch.molecules()[i],
                            batch.mask(i),
                            temperature,
                        ));
                    }
                });
            }
        });
    }
    let mut total = 0.0;
    let mut terms = 0usize;
    store.zero_grads();
    for r in results.into_iter() {
        let (loss, t, grads) = r.expect("all batch slots filled")?;
        total += loss;
        terms += t;
        for (idx, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                store.accumulate_grad(idx, &g);
            }
        }
    }
    Ok((total, terms))
}

/// Mean per-term loss over a dataset with the deterministic
/// hydrogens-last stable ordering.
pub fn mean_heldout_loss<R: Real>(
    model: &ModelConfig,
    store: &ParameterStore<R>,
    molecules: &[Molecule],
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut terms = 0usize;
    for m in molecules {
        if m.len() < 2 {
            continue;
        }
        let om = OrderedMolecule::stable(m.clone());
        let l = trajectory_loss(model, store, &om, None, 1.0)?;
        total += l.total;
        terms += l.terms;
    }
    if terms == 0 {
        return Ok(0.0);
    }
    Ok(total / terms as f64)
}

#[derive(Clone, Debug)]
pub struct ValidationReport {
    pub samples: usize,
    pub validity: f64,
    pub heldout_loss: f64,
    pub unique: usize,
}

/// Generate molecules with compositions drawn from the dataset, check
/// their valences, count distinct heavy-atom keys, and evaluate the mean
/// per-term loss on held-out data (the training data when none is held
/// out). Uses seed-derived RNG streams so the training stream is
/// untouched.
pub fn validate<R: Real>(
    model: &ModelConfig,
    store: &ParameterStore<R>,
    dataset: &[Molecule],
    heldout: &[Molecule],
    samples: usize,
    t_gen: f64,
    seed: u64,
) -> Result<ValidationReport, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut n_valid = 0usize;
    let mut keys: std::collections::HashSet<CanonicalKey> = std::collections::HashSet::new();
    for s in 0..samples {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (s as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let plan = CompositionPlan::from_molecule(&dataset[s % dataset.len()], &mut rng)?;
        match generate(model, store, &plan, t_gen, &mut rng) {
            Ok((mol, _)) => {
                if valence_check(&infer_bonds(&mol)).pass {
                    n_valid += 1;
                    keys.insert(matching_key(&mol, DEFAULT_BOND_TOLERANCE));
                }
            }
            Err(SampleError::RedrawLimit(_)) => {} // counted as invalid
            Err(e) => return Err(e.into()),
        }
    }
    let eval_set = if heldout.is_empty() { dataset } else { heldout };
    let heldout_loss = mean_heldout_loss(model, store, eval_set)?;
    Ok(ValidationReport {
        samples,
        validity: if samples == 0 { 0.0 } else { n_valid as f64 / samples as f64 },
        heldout_loss,
        unique: keys.len(),
    })
}

/// Run the training loop. Metrics lines go to `metrics` as
/// `iter<TAB>loss<TAB>terms`, with validation lines
/// `val<TAB>iter<TAB>validity<TAB>heldout_loss<TAB>unique` every
/// `val_interval` iterations. Checkpoints are written at each validation
/// and at the end when a path is given.
#[allow(clippy::too_many_arguments)]
pub fn train<R: Real>(
    model: &ModelConfig,
    cfg: &TrainConfig,
    dataset: &[Molecule],
    heldout: &[Molecule],
    store: &mut ParameterStore<R>,
    adam: &mut AdamState<R>,
    rng: &mut ChaCha8Rng,
    start_iter: u64,
    checkpoint_path: Option<&Path>,
    metrics: &mut dyn IoWrite,
) -> Result<TrainOutcome, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let io_err = |source: std::io::Error| TrainError::Io { path: "<metrics>".into(), source };
    let mut final_loss = 0.0;
    let mut final_terms = 0;

    for iter in (start_iter + 1)..=cfg.iterations {
        let picks: Vec<usize> =
            (0..cfg.batch_size).map(|_| rng.random_range(0..dataset.len())).collect();
        let oms: Vec<OrderedMolecule> =
            picks.iter().map(|&i| randomize_order(&dataset[i], rng)).collect();
        let batch = Batch::new(oms);
        let (loss, terms) = batch_grads(model, store, &batch, cfg.t_train, cfg.threads)?;

        writeln!(metrics, "{iter}\t{loss:.6}\t{terms}").map_err(io_err)?;
        if !loss.is_finite() {
            let diagnostic = match checkpoint_path {
                Some(p) => {
                    let diag = p.with_extension("diag");
                    save_checkpoint(&diag, store, adam, iter, &RngState::capture(rng))?;
                    diag.display().to_string()
                }
                None => "<none>".into(),
            };
            return Err(TrainError::NonFiniteLoss { iter, diagnostic });
        }
        adam_step(store, adam)?;
        final_loss = loss;
        final_terms = terms;

        if iter % cfg.val_interval == 0 {
            let report = validate(
                model,
                store,
                dataset,
                heldout,
                cfg.val_samples,
                cfg.t_val,
                cfg.seed ^ iter,
            )?;
            writeln!(
                metrics,
                "val\t{iter}\t{:.6}\t{:.6}\t{}",
                report.validity, report.heldout_loss, report.unique
            )
            .map_err(io_err)?;
            if let Some(p) = checkpoint_path {
                save_checkpoint(p, store, adam, iter, &RngState::capture(rng))?;
            }
        }
    }
    if let Some(p) = checkpoint_path {
        save_checkpoint(p, store, adam, cfg.iterations, &RngState::capture(rng))?;
    }
    Ok(TrainOutcome { iterations_run: cfg.iterations - start_iter, final_loss, final_terms })
}
