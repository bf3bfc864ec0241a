//! Molecule representation, XYZ ingestion, distance geometry, atom
//! ordering, and dataset handling.
//!
//! Geometry stays in f64 throughout; only the network side of the code
//! base is precision-generic. Every type here is immutable after
//! construction and safe to share across threads.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

/// Minimum allowed interatomic separation; anything closer is treated as
/// a coincident-atom defect.
pub const MIN_SEPARATION: f64 = 0.1;

/// Element table: the H/C/N/O/F organic subset.
const ELEMENTS: [(u8, &str); 5] = [(1, "H"), (6, "C"), (7, "N"), (8, "O"), (9, "F")];

pub fn symbol_to_charge(symbol: &str) -> Option<u8> {
    ELEMENTS.iter().find(|(_, s)| *s == symbol).map(|(z, _)| *z)
}

pub fn charge_to_symbol(z: u8) -> Option<&'static str> {
    ELEMENTS.iter().find(|(c, _)| *c == z).map(|(_, s)| *s)
}

/// Dense index 0..5 for a supported nuclear charge; used by the embedding
/// table.
pub fn charge_index(z: u8) -> Option<usize> {
    ELEMENTS.iter().position(|(c, _)| *c == z)
}

pub const NUM_ELEMENTS: usize = ELEMENTS.len();

#[derive(Debug, Error)]
pub enum ChemError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{0}")]
    Geometry(String),
    #[error("unsupported nuclear charge {0}")]
    UnsupportedCharge(u8),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Nuclear charges plus Cartesian positions in angstrom.
#[derive(Clone, Debug, PartialEq)]
pub struct Molecule {
    charges: Vec<u8>,
    positions: Vec<[f64; 3]>,
}

impl Molecule {
    pub fn new(charges: Vec<u8>, positions: Vec<[f64; 3]>) -> Result<Self, ChemError> {
        if charges.is_empty() {
            return Err(ChemError::Geometry("molecule must contain at least one atom".into()));
        }
        if charges.len() != positions.len() {
            return Err(ChemError::Geometry(format!(
                "{} charges but {} positions",
                charges.len(),
                positions.len()
            )));
        }
        if charges.contains(&0) {
            return Err(ChemError::Geometry("nuclear charges must be positive".into()));
        }
        for i in 0..positions.len() {
            for j in (i + 1)..positions.len() {
                let d = dist(positions[i], positions[j]);
                if d <= MIN_SEPARATION {
                    return Err(ChemError::Geometry(format!(
                        "atoms {i} and {j} are {d:.4} A apart (min {MIN_SEPARATION} A)"
                    )));
                }
            }
        }
        Ok(Molecule { charges, positions })
    }

    pub fn len(&self) -> usize {
        self.charges.len()
    }

    pub fn is_empty(&self) -> bool {
        false // n >= 1 by construction
    }

    pub fn charges(&self) -> &[u8] {
        &self.charges
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn num_hydrogens(&self) -> usize {
        self.charges.iter().filter(|&&z| z == 1).count()
    }

    /// Hill-ish formula string, e.g. "C7O2H10" -> C first, H last.
    pub fn formula(&self) -> String {
        let mut counts = std::collections::BTreeMap::new();
        for &z in &self.charges {
            *counts.entry(z).or_insert(0usize) += 1;
        }
        let mut out = String::new();
        let order = [6u8, 7, 8, 9, 1];
        for z in order {
            if let Some(&n) = counts.get(&z) {
                let sym = charge_to_symbol(z).unwrap_or("?");
                if n == 1 {
                    write!(out, "{sym}").unwrap();
                } else {
                    write!(out, "{sym}{n}").unwrap();
                }
            }
        }
        out
    }
}

pub fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Symmetric matrix of pairwise Euclidean distances, zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    d: Vec<f64>,
}

impl DistanceMatrix {
    pub fn of(m: &Molecule) -> Self {
        Self::from_positions(m.positions())
    }

    pub fn from_positions(positions: &[[f64; 3]]) -> Self {
        let n = positions.len();
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let v = dist(positions[i], positions[j]);
                d[i * n + j] = v;
                d[j * n + i] = v;
            }
        }
        DistanceMatrix { n, d }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }

    /// The leading k x k block (distances among the first k atoms).
    pub fn prefix(&self, k: usize) -> DistanceMatrix {
        assert!(k <= self.n);
        let mut d = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                d[i * k + j] = self.get(i, j);
            }
        }
        DistanceMatrix { n: k, d }
    }
}

/// Convenience free function mirroring the matrix constructor.
pub fn distance_matrix(m: &Molecule) -> DistanceMatrix {
    DistanceMatrix::of(m)
}

/// A molecule together with a placement order. Hydrogens always come
/// after every heavy atom.
#[derive(Clone, Debug)]
pub struct OrderedMolecule {
    molecule: Molecule,
    perm: Vec<usize>,
    ordered_charges: Vec<u8>,
    ordered_positions: Vec<[f64; 3]>,
}

impl OrderedMolecule {
    pub fn new(molecule: Molecule, perm: Vec<usize>) -> Result<Self, ChemError> {
        let n = molecule.len();
        if perm.len() != n {
            return Err(ChemError::Geometry(format!(
                "permutation length {} for {} atoms",
                perm.len(),
                n
            )));
        }
        let mut seen = vec![false; n];
        for &p in &perm {
            if p >= n || seen[p] {
                return Err(ChemError::Geometry("permutation is not a bijection".into()));
            }
            seen[p] = true;
        }
        let ordered_charges: Vec<u8> = perm.iter().map(|&p| molecule.charges()[p]).collect();
        let ordered_positions: Vec<[f64; 3]> =
            perm.iter().map(|&p| molecule.positions()[p]).collect();
        let first_h = ordered_charges.iter().position(|&z| z == 1);
        if let Some(h) = first_h {
            if ordered_charges[h..].iter().any(|&z| z != 1) {
                return Err(ChemError::Geometry(
                    "hydrogens must be placed after all heavy atoms".into(),
                ));
            }
        }
        Ok(OrderedMolecule { molecule, perm, ordered_charges, ordered_positions })
    }

    /// Heavy atoms in input order followed by hydrogens in input order.
    pub fn stable(molecule: Molecule) -> Self {
        let mut perm: Vec<usize> = (0..molecule.len()).collect();
        perm.sort_by_key(|&i| molecule.charges()[i] == 1);
        OrderedMolecule::new(molecule, perm).expect("stable ordering is always valid")
    }

    pub fn molecule(&self) -> &Molecule {
        &self.molecule
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn len(&self) -> usize {
        self.ordered_charges.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Charges in placement order.
    pub fn charges(&self) -> &[u8] {
        &self.ordered_charges
    }

    /// Positions in placement order.
    pub fn positions(&self) -> &[[f64; 3]] {
        &self.ordered_positions
    }

    pub fn distance_matrix(&self) -> DistanceMatrix {
        DistanceMatrix::from_positions(&self.ordered_positions)
    }
}

/// Uniformly random placement order: heavy atoms shuffled among the
/// leading positions, hydrogens shuffled among the trailing ones.
pub fn randomize_order<RNG: Rng>(m: &Molecule, rng: &mut RNG) -> OrderedMolecule {
    let mut heavy: Vec<usize> = (0..m.len()).filter(|&i| m.charges()[i] != 1).collect();
    let mut hydro: Vec<usize> = (0..m.len()).filter(|&i| m.charges()[i] == 1).collect();
    heavy.shuffle(rng);
    hydro.shuffle(rng);
    heavy.extend(hydro);
    OrderedMolecule::new(m.clone(), heavy).expect("shuffled ordering is always valid")
}

/// Mini-batch with a per-step mask. All molecules share the mask width
/// (the largest step count in the batch); masked steps contribute exactly
/// zero to any loss.
#[derive(Clone, Debug)]
pub struct Batch {
    molecules: Vec<OrderedMolecule>,
    steps: usize,
    mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn new(molecules: Vec<OrderedMolecule>) -> Self {
        let steps = molecules.iter().map(|m| m.len().saturating_sub(1)).max().unwrap_or(0);
        let mask =
            molecules.iter().map(|m| (0..steps).map(|s| s < m.len() - 1).collect()).collect();
        Batch { molecules, steps, mask }
    }

    pub fn len(&self) -> usize {
        self.molecules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.molecules.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn molecules(&self) -> &[OrderedMolecule] {
        &self.molecules
    }

    pub fn mask(&self, i: usize) -> &[bool] {
        &self.mask[i]
    }
}

// ── XYZ format ──────────────────────────────────────────────────────

/// Parse one or more concatenated XYZ blocks:
/// count line, comment line, then `symbol x y z` per atom.
pub fn parse_xyz(text: &str) -> Result<Vec<Molecule>, ChemError> {
    let lines: Vec<&str> = text.lines().collect();
    let mut molecules = Vec::new();
    let mut i = 0usize;
    while i < lines.len() {
        if lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        let count_line = i;
        let count: usize = lines[i].trim().parse().map_err(|_| ChemError::Parse {
            line: count_line + 1,
            message: format!("expected atom count, got {:?}", lines[i].trim()),
        })?;
        if count == 0 {
            return Err(ChemError::Parse {
                line: count_line + 1,
                message: "atom count must be at least 1".into(),
            });
        }
        let mut charges = Vec::with_capacity(count);
        let mut positions = Vec::with_capacity(count);
        for a in 0..count {
            let lineno = count_line + 2 + a;
            let line = lines.get(lineno).map(|l| l.trim()).unwrap_or("");
            if line.is_empty() {
                return Err(ChemError::Parse {
                    line: lineno + 1,
                    message: format!("expected {count} atom lines, found {a}"),
                });
            }
            let mut parts = line.split_whitespace();
            let sym = parts.next().unwrap();
            let z = symbol_to_charge(sym).ok_or_else(|| ChemError::Parse {
                line: lineno + 1,
                message: format!("unknown element symbol {sym:?}"),
            })?;
            let mut coord = [0.0f64; 3];
            for c in coord.iter_mut() {
                let tok = parts.next().ok_or_else(|| ChemError::Parse {
                    line: lineno + 1,
                    message: "expected `symbol x y z`".into(),
                })?;
                *c = tok.parse().map_err(|_| ChemError::Parse {
                    line: lineno + 1,
                    message: format!("non-numeric coordinate {tok:?}"),
                })?;
            }
            charges.push(z);
            positions.push(coord);
        }
        i = count_line + 2 + count;
        molecules.push(
            Molecule::new(charges, positions)
                .map_err(|e| ChemError::Parse { line: count_line + 1, message: e.to_string() })?,
        );
    }
    Ok(molecules)
}

/// Append one XYZ block with 6-decimal coordinates.
pub fn write_xyz_block(m: &Molecule, comment: &str, out: &mut String) {
    writeln!(out, "{}", m.len()).unwrap();
    writeln!(out, "{comment}").unwrap();
    for (z, p) in m.charges().iter().zip(m.positions()) {
        let sym = charge_to_symbol(*z).unwrap_or("X");
        writeln!(out, "{sym} {:.6} {:.6} {:.6}", p[0], p[1], p[2]).unwrap();
    }
}

pub fn write_xyz(molecules: &[Molecule], comments: &[String]) -> String {
    let mut out = String::new();
    for (i, m) in molecules.iter().enumerate() {
        let comment = comments.get(i).map(String::as_str).unwrap_or("");
        write_xyz_block(m, comment, &mut out);
    }
    out
}

/// Load molecules from an `.xyz` file, or from a manifest (one xyz path
/// per line, `#` comments, resolved relative to the manifest).
pub fn load_dataset(path: &Path) -> Result<Vec<Molecule>, ChemError> {
    let read = |p: &Path| {
        std::fs::read_to_string(p)
            .map_err(|source| ChemError::Io { path: p.display().to_string(), source })
    };
    if path.extension().map(|e| e == "xyz").unwrap_or(false) {
        return parse_xyz(&read(path)?);
    }
    let manifest = read(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut molecules = Vec::new();
    for line in manifest.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let entry = base.join(line);
        molecules.extend(parse_xyz(&read(&entry)?)?);
    }
    Ok(molecules)
}

/// Deterministic split by seeded shuffle: floor(fraction * n) molecules
/// for training, the rest held out.
pub fn split_train_test(
    molecules: Vec<Molecule>,
    train_fraction: f64,
    seed: u64,
) -> (Vec<Molecule>, Vec<Molecule>) {
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..molecules.len()).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = ((molecules.len() as f64) * train_fraction).floor() as usize;
    let mut mols: Vec<Option<Molecule>> = molecules.into_iter().map(Some).collect();
    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::new();
    for (rank, idx) in order.into_iter().enumerate() {
        let m = mols[idx].take().unwrap();
        if rank < n_train {
            train.push(m);
        } else {
            test.push(m);
        }
    }
    (train, test)
}

// ── rigid transforms (test and diagnostics support) ─────────────────

pub fn apply_rigid(m: &Molecule, rot: &[[f64; 3]; 3], shift: [f64; 3]) -> Molecule {
    let positions = m
        .positions()
        .iter()
        .map(|p| {
            [
                rot[0][0] * p[0] + rot[0][1] * p[1] + rot[0][2] * p[2] + shift[0],
                rot[1][0] * p[0] + rot[1][1] * p[1] + rot[1][2] * p[2] + shift[1],
                rot[2][0] * p[0] + rot[2][1] * p[1] + rot[2][2] * p[2] + shift[2],
            ]
        })
        .collect();
    Molecule::new(m.charges().to_vec(), positions).expect("rigid motion preserves validity")
}

/// Uniformly random rotation matrix (random unit quaternion).
pub fn random_rotation<RNG: Rng>(rng: &mut RNG) -> [[f64; 3]; 3] {
    let u1: f64 = rng.random_range(0.0..1.0);
    let u2: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let u3: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    let (w, x, y, z) = (a * u2.sin(), a * u2.cos(), b * u3.sin(), b * u3.cos());
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}
