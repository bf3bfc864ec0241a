//! Post-hoc validation and statistics for generated molecules: geometric
//! bond inference, valence checking, canonical bond-graph keys for
//! uniqueness and matching, and optimal-superposition RMSD.

use std::collections::HashSet;
use std::fmt;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::chem::{charge_to_symbol, dist, Molecule};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("heavy-atom subgraph is empty")]
    NoHeavyAtoms,
    #[error("molecules have {0} and {1} atoms")]
    CountMismatch(usize, usize),
    #[error("charge multisets differ")]
    ChargeMismatch,
}

/// Covalent radius in angstrom.
pub fn covalent_radius(z: u8) -> Option<f64> {
    match z {
        1 => Some(0.31),
        6 => Some(0.76),
        7 => Some(0.71),
        8 => Some(0.66),
        9 => Some(0.57),
        _ => None,
    }
}

/// Expected number of covalent bonds.
pub fn valence(z: u8) -> Option<usize> {
    match z {
        1 => Some(1),
        6 => Some(4),
        7 => Some(3),
        8 => Some(2),
        9 => Some(1),
        _ => None,
    }
}

pub const DEFAULT_BOND_TOLERANCE: f64 = 1.2;

/// Atoms plus geometrically inferred undirected bonds.
#[derive(Clone, Debug)]
pub struct BondGraph {
    charges: Vec<u8>,
    bonds: Vec<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
}

impl BondGraph {
    pub fn charges(&self) -> &[u8] {
        &self.charges
    }

    pub fn bonds(&self) -> &[(usize, usize)] {
        &self.bonds
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    pub fn len(&self) -> usize {
        self.charges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.charges.is_empty()
    }

    /// The subgraph over non-hydrogen atoms, reindexed.
    pub fn heavy_subgraph(&self) -> BondGraph {
        let heavy: Vec<usize> = (0..self.len()).filter(|&i| self.charges[i] != 1).collect();
        let index_of: std::collections::HashMap<usize, usize> =
            heavy.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        let charges = heavy.iter().map(|&i| self.charges[i]).collect();
        let bonds: Vec<(usize, usize)> = self
            .bonds
            .iter()
            .filter_map(|&(a, b)| match (index_of.get(&a), index_of.get(&b)) {
                (Some(&x), Some(&y)) => Some((x, y)),
                _ => None,
            })
            .collect();
        let mut adjacency = vec![Vec::new(); heavy.len()];
        for &(a, b) in &bonds {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        BondGraph { charges, bonds, adjacency }
    }

    fn connected(&self) -> bool {
        if self.len() <= 1 {
            return true;
        }
        let mut seen = vec![false; self.len()];
        let mut queue = vec![0usize];
        seen[0] = true;
        while let Some(v) = queue.pop() {
            for &w in &self.adjacency[v] {
                if !seen[w] {
                    seen[w] = true;
                    queue.push(w);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Bond between i and j iff d_ij < tol * (r_cov(Z_i) + r_cov(Z_j)).
pub fn infer_bonds_with(m: &Molecule, tol_factor: f64) -> BondGraph {
    let n = m.len();
    let mut bonds = Vec::new();
    let mut adjacency = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            let ri = covalent_radius(m.charges()[i]).unwrap_or(0.0);
            let rj = covalent_radius(m.charges()[j]).unwrap_or(0.0);
            if dist(m.positions()[i], m.positions()[j]) < tol_factor * (ri + rj) {
                bonds.push((i, j));
                adjacency[i].push(j);
                adjacency[j].push(i);
            }
        }
    }
    BondGraph { charges: m.charges().to_vec(), bonds, adjacency }
}

pub fn infer_bonds(m: &Molecule) -> BondGraph {
    infer_bonds_with(m, DEFAULT_BOND_TOLERANCE)
}

/// Per-atom valence outcome for one molecule.
#[derive(Clone, Debug)]
pub struct ValenceReport {
    pub pass: bool,
    pub heavy_connected: bool,
    /// (atom index, charge, expected bonds, actual bonds) per atom.
    pub atoms: Vec<(usize, u8, usize, usize)>,
}

impl ValenceReport {
    pub fn failures(&self) -> impl Iterator<Item = &(usize, u8, usize, usize)> {
        self.atoms.iter().filter(|(_, _, want, got)| want != got)
    }
}

/// Pass iff every atom has exactly its valence and the heavy-atom graph
/// is connected.
pub fn valence_check(g: &BondGraph) -> ValenceReport {
    let mut atoms = Vec::with_capacity(g.len());
    let mut all_ok = true;
    for i in 0..g.len() {
        let z = g.charges()[i];
        let want = valence(z).unwrap_or(0);
        let got = g.degree(i);
        if want != got {
            all_ok = false;
        }
        atoms.push((i, z, want, got));
    }
    let heavy_connected = g.heavy_subgraph().connected();
    ValenceReport { pass: all_ok && heavy_connected, heavy_connected, atoms }
}

// ── canonical bond-graph keys ───────────────────────────────────────

/// Permutation-invariant identifier of the heavy-atom bond graph.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CanonicalKey(String);

impl fmt::Display for CanonicalKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl CanonicalKey {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// Rank vertices by (color, sorted neighbor colors) until stable. Colors
/// are dense ranks, so equal partitions map to equal colorings across
/// isomorphic graphs.
fn refine(colors: &mut Vec<usize>, adjacency: &[Vec<usize>]) {
    loop {
        let sigs: Vec<(usize, Vec<usize>)> = (0..colors.len())
            .map(|v| {
                let mut ns: Vec<usize> = adjacency[v].iter().map(|&w| colors[w]).collect();
                ns.sort_unstable();
                (colors[v], ns)
            })
            .collect();
        let mut uniq = sigs.clone();
        uniq.sort();
        uniq.dedup();
        let new: Vec<usize> =
            sigs.iter().map(|s| uniq.binary_search(s).expect("own signature present")).collect();
        if new == *colors {
            return;
        }
        *colors = new;
    }
}

fn labeling_string(charges: &[u8], adjacency: &[Vec<usize>], colors: &[usize]) -> String {
    // colors form a discrete ranking: the new label of v is colors[v]
    let n = charges.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&v| colors[v]);
    let mut atom_part: Vec<&str> = Vec::with_capacity(n);
    for &v in &order {
        atom_part.push(charge_to_symbol(charges[v]).unwrap_or("X"));
    }
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for v in 0..n {
        for &w in &adjacency[v] {
            if v < w {
                let (a, b) = (colors[v].min(colors[w]), colors[v].max(colors[w]));
                edges.push((a, b));
            }
        }
    }
    edges.sort_unstable();
    let edge_part: Vec<String> = edges.iter().map(|(a, b)| format!("{a}-{b}")).collect();
    format!("{}|{}", atom_part.join(","), edge_part.join(","))
}

fn canonical_search(
    charges: &[u8],
    adjacency: &[Vec<usize>],
    mut colors: Vec<usize>,
    best: &mut Option<String>,
) {
    refine(&mut colors, adjacency);
    let n = colors.len();
    let n_classes = colors.iter().collect::<HashSet<_>>().len();
    if n_classes == n {
        let s = labeling_string(charges, adjacency, &colors);
        if best.as_ref().map(|b| s < *b).unwrap_or(true) {
            *best = Some(s);
        }
        return;
    }
    // smallest color class id with at least two members
    let target = (0..n)
        .map(|v| colors[v])
        .filter(|&c| colors.iter().filter(|&&x| x == c).count() > 1)
        .min()
        .expect("non-discrete partition has a splittable class");
    for v in 0..n {
        if colors[v] == target {
            let child: Vec<usize> = (0..n).map(|u| 2 * colors[u] + usize::from(u == v)).collect();
            canonical_search(charges, adjacency, child, best);
        }
    }
}

/// Canonical key of the heavy-atom subgraph via color refinement with
/// individualization backtracking: equal exactly for isomorphic graphs.
pub fn canonical_key(g: &BondGraph) -> Result<CanonicalKey, AnalysisError> {
    let heavy = g.heavy_subgraph();
    if heavy.is_empty() {
        return Err(AnalysisError::NoHeavyAtoms);
    }
    // initial colors: rank of nuclear charge
    let mut charges_sorted: Vec<u8> = heavy.charges().to_vec();
    charges_sorted.sort_unstable();
    charges_sorted.dedup();
    let colors: Vec<usize> =
        heavy.charges().iter().map(|z| charges_sorted.binary_search(z).unwrap()).collect();
    let mut best = None;
    canonical_search(heavy.charges(), &heavy.adjacency, colors, &mut best);
    Ok(CanonicalKey(best.expect("non-empty graph yields a labeling")))
}

/// Key for matching: heavy-atom canonical key, or a hydrogen-count
/// sentinel for molecules with no heavy atoms.
pub fn matching_key(m: &Molecule, tol_factor: f64) -> CanonicalKey {
    let g = infer_bonds_with(m, tol_factor);
    canonical_key(&g).unwrap_or_else(|_| CanonicalKey(format!("H{}", m.num_hydrogens())))
}

// ── match statistics ────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MatchStats {
    pub total: usize,
    pub invalid: usize,
    pub valid: usize,
    pub unique: usize,
    pub match_train: usize,
    pub match_test: usize,
    pub new: usize,
}

/// RMSD means per category, all-atom and heavy-atom rows. Entries are
/// None where no reference geometry exists.
#[derive(Clone, Debug, Default)]
pub struct RmsdSummary {
    pub all_atoms: [Option<f64>; 5],
    pub heavy_atoms: [Option<f64>; 5],
}

pub const RMSD_CATEGORIES: [&str; 5] = ["train", "test", "new", "all_valid", "failed"];

#[derive(Clone, Debug)]
pub struct MatchReport {
    pub stats: MatchStats,
    pub rmsd: RmsdSummary,
}

/// Deduplicate valid generated molecules by canonical key and match them
/// against the train and test sets. Matched structures are additionally
/// compared geometrically against the first reference sharing their key.
pub fn match_statistics(
    generated: &[Molecule],
    train: &[Molecule],
    test: &[Molecule],
    tol_factor: f64,
) -> MatchReport {
    let train_keys: Vec<CanonicalKey> = train.iter().map(|m| matching_key(m, tol_factor)).collect();
    let test_keys: Vec<CanonicalKey> = test.iter().map(|m| matching_key(m, tol_factor)).collect();
    let train_set: HashSet<&CanonicalKey> = train_keys.iter().collect();
    let test_set: HashSet<&CanonicalKey> = test_keys.iter().collect();

    let mut stats = MatchStats { total: generated.len(), ..Default::default() };
    let mut seen: HashSet<CanonicalKey> = HashSet::new();
    let mut rmsd_acc: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); 5];

    for m in generated {
        let g = infer_bonds_with(m, tol_factor);
        if !valence_check(&g).pass {
            stats.invalid += 1;
            continue;
        }
        stats.valid += 1;
        let key = matching_key(m, tol_factor);
        if !seen.insert(key.clone()) {
            continue;
        }
        stats.unique += 1;
        let (category, reference) = if train_set.contains(&key) {
            stats.match_train += 1;
            (0, train_keys.iter().position(|k| *k == key).map(|i| &train[i]))
        } else if test_set.contains(&key) {
            stats.match_test += 1;
            (1, test_keys.iter().position(|k| *k == key).map(|i| &test[i]))
        } else {
            stats.new += 1;
            (2, None)
        };
        if let Some(reference) = reference {
            if let (Ok(all), Ok(heavy)) =
                (kabsch_rmsd_matched(m, reference, false), kabsch_rmsd_matched(m, reference, true))
            {
                rmsd_acc[category].0.push(all);
                rmsd_acc[category].1.push(heavy);
                rmsd_acc[3].0.push(all); // all_valid
                rmsd_acc[3].1.push(heavy);
            }
        }
    }

    let mean = |v: &Vec<f64>| {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    let mut rmsd = RmsdSummary::default();
    for (i, (all, heavy)) in rmsd_acc.iter().enumerate() {
        rmsd.all_atoms[i] = mean(all);
        rmsd.heavy_atoms[i] = mean(heavy);
    }
    MatchReport { stats, rmsd }
}

impl MatchReport {
    /// Human-readable table.
    pub fn human(&self) -> String {
        use std::fmt::Write as _;
        let s = &self.stats;
        let mut out = String::new();
        writeln!(out, "generated molecules : {}", s.total).unwrap();
        writeln!(out, "  invalid (valence) : {}", s.invalid).unwrap();
        writeln!(out, "  valid             : {}", s.valid).unwrap();
        writeln!(out, "  unique            : {}", s.unique).unwrap();
        writeln!(out, "    match train     : {}", s.match_train).unwrap();
        writeln!(out, "    match test      : {}", s.match_test).unwrap();
        writeln!(out, "    new             : {}", s.new).unwrap();
        writeln!(out, "mean RMSD vs matched reference (A):").unwrap();
        let fmt_cell = |v: Option<f64>| match v {
            Some(x) => format!("{x:.4}"),
            None => "-".to_string(),
        };
        write!(out, "  {:<12}", "").unwrap();
        for c in RMSD_CATEGORIES {
            write!(out, "{c:>10}").unwrap();
        }
        writeln!(out).unwrap();
        write!(out, "  {:<12}", "all atoms").unwrap();
        for v in self.rmsd.all_atoms {
            write!(out, "{:>10}", fmt_cell(v)).unwrap();
        }
        writeln!(out).unwrap();
        write!(out, "  {:<12}", "heavy atoms").unwrap();
        for v in self.rmsd.heavy_atoms {
            write!(out, "{:>10}", fmt_cell(v)).unwrap();
        }
        writeln!(out).unwrap();
        out
    }

    /// Machine-readable `key<TAB>value` sections.
    pub fn machine(&self) -> String {
        use std::fmt::Write as _;
        let s = &self.stats;
        let mut out = String::from("counts\n");
        writeln!(out, "total\t{}", s.total).unwrap();
        writeln!(out, "invalid\t{}", s.invalid).unwrap();
        writeln!(out, "valid\t{}", s.valid).unwrap();
        writeln!(out, "unique\t{}", s.unique).unwrap();
        writeln!(out, "match_train\t{}", s.match_train).unwrap();
        writeln!(out, "match_test\t{}", s.match_test).unwrap();
        writeln!(out, "new\t{}", s.new).unwrap();
        let cell = |v: Option<f64>| match v {
            Some(x) => format!("{x:.6}"),
            None => "-".to_string(),
        };
        writeln!(out, "rmsd_all_atoms").unwrap();
        for (c, v) in RMSD_CATEGORIES.iter().zip(self.rmsd.all_atoms) {
            writeln!(out, "{c}\t{}", cell(v)).unwrap();
        }
        writeln!(out, "rmsd_heavy_atoms").unwrap();
        for (c, v) in RMSD_CATEGORIES.iter().zip(self.rmsd.heavy_atoms) {
            writeln!(out, "{c}\t{}", cell(v)).unwrap();
        }
        out
    }
}

// ── RMSD ────────────────────────────────────────────────────────────

fn filtered_points(m: &Molecule, heavy_only: bool) -> (Vec<u8>, Vec<Vector3<f64>>) {
    let mut charges = Vec::new();
    let mut points = Vec::new();
    for (&z, &p) in m.charges().iter().zip(m.positions()) {
        if heavy_only && z == 1 {
            continue;
        }
        charges.push(z);
        points.push(Vector3::new(p[0], p[1], p[2]));
    }
    (charges, points)
}

fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().sum::<Vector3<f64>>() / points.len() as f64
}

/// Optimal rotation (reflection-corrected SVD) mapping centered `x` onto
/// centered `y`.
fn kabsch_rotation(x: &[Vector3<f64>], y: &[Vector3<f64>]) -> Matrix3<f64> {
    let mut c = Matrix3::zeros();
    for (a, b) in x.iter().zip(y) {
        c += b * a.transpose();
    }
    let svd = c.svd(true, true);
    let u = svd.u.expect("svd requested u");
    let v_t = svd.v_t.expect("svd requested v_t");
    let d = (u * v_t).determinant();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d.signum()));
    u * correction * v_t
}

fn rmsd_of(x: &[Vector3<f64>], y: &[Vector3<f64>]) -> f64 {
    let cx = centroid(x);
    let cy = centroid(y);
    let xs: Vec<Vector3<f64>> = x.iter().map(|p| p - cx).collect();
    let ys: Vec<Vector3<f64>> = y.iter().map(|p| p - cy).collect();
    let rot = kabsch_rotation(&xs, &ys);
    let ss: f64 = xs.iter().zip(&ys).map(|(a, b)| (rot * a - b).norm_squared()).sum();
    (ss / xs.len() as f64).sqrt()
}

fn multisets_match(a: &[u8], b: &[u8]) -> bool {
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_unstable();
    sb.sort_unstable();
    sa == sb
}

/// RMSD after optimal rigid superposition, with correspondence by index.
pub fn kabsch_rmsd(a: &Molecule, b: &Molecule, heavy_only: bool) -> Result<f64, AnalysisError> {
    let (ca, pa) = filtered_points(a, heavy_only);
    let (cb, pb) = filtered_points(b, heavy_only);
    if pa.len() != pb.len() {
        return Err(AnalysisError::CountMismatch(pa.len(), pb.len()));
    }
    if !multisets_match(&ca, &cb) {
        return Err(AnalysisError::ChargeMismatch);
    }
    Ok(rmsd_of(&pa, &pb))
}

/// Greedy nearest-neighbor pairing within one element class.
fn greedy_pairs(xs: &[(usize, Vector3<f64>)], ys: &[(usize, Vector3<f64>)]) -> Vec<(usize, usize)> {
    let mut used_x = vec![false; xs.len()];
    let mut used_y = vec![false; ys.len()];
    let mut pairs = Vec::with_capacity(xs.len());
    for _ in 0..xs.len() {
        let mut best = (f64::INFINITY, 0usize, 0usize);
        for (i, (_, px)) in xs.iter().enumerate() {
            if used_x[i] {
                continue;
            }
            for (j, (_, py)) in ys.iter().enumerate() {
                if used_y[j] {
                    continue;
                }
                let d = (px - py).norm();
                if d < best.0 {
                    best = (d, i, j);
                }
            }
        }
        used_x[best.1] = true;
        used_y[best.2] = true;
        pairs.push((xs[best.1].0, ys[best.2].0));
    }
    pairs
}

/// Principal axes (descending spread), right-handed, as matrix columns.
fn principal_axes(points: &[Vector3<f64>]) -> Matrix3<f64> {
    let mut c = Matrix3::zeros();
    for p in points {
        c += p * p.transpose();
    }
    let eig = nalgebra::SymmetricEigen::new(c);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let mut m = Matrix3::zeros();
    for (col, &i) in order.iter().enumerate() {
        m.set_column(col, &eig.eigenvectors.column(i));
    }
    if m.determinant() < 0.0 {
        let flipped = -m.column(2).into_owned();
        m.set_column(2, &flipped);
    }
    m
}

/// Greedy element-wise pairing of two centered clouds; returns the
/// pairing and its summed squared distance.
fn match_clouds(
    ca: &[u8],
    xs: &[Vector3<f64>],
    cb: &[u8],
    ys: &[Vector3<f64>],
) -> (Vec<(usize, usize)>, f64) {
    let mut elements: Vec<u8> = ca.to_vec();
    elements.sort_unstable();
    elements.dedup();
    let mut pairing = Vec::with_capacity(xs.len());
    for &z in &elements {
        let xz: Vec<(usize, Vector3<f64>)> =
            (0..xs.len()).filter(|&i| ca[i] == z).map(|i| (i, xs[i])).collect();
        let yz: Vec<(usize, Vector3<f64>)> =
            (0..ys.len()).filter(|&j| cb[j] == z).map(|j| (j, ys[j])).collect();
        pairing.extend(greedy_pairs(&xz, &yz));
    }
    let cost = pairing.iter().map(|&(i, j)| (xs[i] - ys[j]).norm_squared()).sum();
    (pairing, cost)
}

/// RMSD with unknown atom correspondence. A candidate pre-alignment
/// (principal axes of the heavy atoms, all four proper sign choices)
/// seeds a greedy element-wise nearest matching, which is then refined
/// by two rounds of Kabsch alignment and re-matching.
pub fn kabsch_rmsd_matched(
    a: &Molecule,
    b: &Molecule,
    heavy_only: bool,
) -> Result<f64, AnalysisError> {
    let (ca, pa) = filtered_points(a, heavy_only);
    let (cb, pb) = filtered_points(b, heavy_only);
    if pa.len() != pb.len() {
        return Err(AnalysisError::CountMismatch(pa.len(), pb.len()));
    }
    if !multisets_match(&ca, &cb) {
        return Err(AnalysisError::ChargeMismatch);
    }
    let cx = centroid(&pa);
    let cy = centroid(&pb);
    let xs0: Vec<Vector3<f64>> = pa.iter().map(|p| p - cx).collect();
    let ys: Vec<Vector3<f64>> = pb.iter().map(|p| p - cy).collect();

    // pre-alignment candidates from heavy-atom principal axes
    let heavy_of = |charges: &[u8], pts: &[Vector3<f64>]| -> Vec<Vector3<f64>> {
        let heavy: Vec<Vector3<f64>> =
            pts.iter().zip(charges).filter(|(_, &z)| z != 1).map(|(p, _)| *p).collect();
        if heavy.len() >= 2 {
            heavy
        } else {
            pts.to_vec()
        }
    };
    let ax = principal_axes(&heavy_of(&ca, &xs0));
    let ay = principal_axes(&heavy_of(&cb, &ys));
    let signs = [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]];
    type Candidate = (f64, Vec<Vector3<f64>>, Vec<(usize, usize)>);
    let mut best: Option<Candidate> = None;
    for s in signs {
        let flip = Matrix3::from_diagonal(&Vector3::new(s[0], s[1], s[2]));
        let rot = ay * flip * ax.transpose();
        let xr: Vec<Vector3<f64>> = xs0.iter().map(|p| rot * p).collect();
        let (pairing, cost) = match_clouds(&ca, &xr, &cb, &ys);
        if best.as_ref().map(|(c, _, _)| cost < *c).unwrap_or(true) {
            best = Some((cost, xr, pairing));
        }
    }
    let (_, mut xs, mut pairing) = best.expect("at least one candidate");

    for _round in 0..2 {
        let px: Vec<Vector3<f64>> = pairing.iter().map(|&(i, _)| xs[i]).collect();
        let py: Vec<Vector3<f64>> = pairing.iter().map(|&(_, j)| ys[j]).collect();
        let rot = kabsch_rotation(&px, &py);
        xs.iter_mut().for_each(|p| *p = rot * *p);
        pairing = match_clouds(&ca, &xs, &cb, &ys).0;
    }
    let px: Vec<Vector3<f64>> = pairing.iter().map(|&(i, _)| xs[i]).collect();
    let py: Vec<Vector3<f64>> = pairing.iter().map(|&(_, j)| ys[j]).collect();
    Ok(rmsd_of(&px, &py))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chem::{apply_rigid, random_rotation};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn methane() -> Molecule {
        let a = 1.09 / 3.0f64.sqrt();
        Molecule::new(
            vec![6, 1, 1, 1, 1],
            vec![[0.0, 0.0, 0.0], [a, a, a], [-a, -a, a], [-a, a, -a], [a, -a, -a]],
        )
        .unwrap()
    }

    fn ethanol() -> Molecule {
        // textbook-ish geometry, C-C-O backbone with 6 H
        Molecule::new(
            vec![6, 6, 8, 1, 1, 1, 1, 1, 1],
            vec![
                [-1.247, -0.225, 0.000],
                [0.057, 0.548, 0.000],
                [1.180, -0.331, 0.000],
                [-2.114, 0.445, 0.000],
                [-1.304, -0.860, 0.889],
                [-1.304, -0.860, -0.889],
                [0.114, 1.190, 0.887],
                [0.114, 1.190, -0.887],
                [1.985, 0.190, 0.000],
            ],
        )
        .unwrap()
    }

    fn dimethyl_ether() -> Molecule {
        Molecule::new(
            vec![6, 8, 6, 1, 1, 1, 1, 1, 1],
            vec![
                [-1.170, -0.201, 0.000],
                [0.000, 0.604, 0.000],
                [1.170, -0.201, 0.000],
                [-2.021, 0.477, 0.000],
                [-1.220, -0.840, 0.888],
                [-1.220, -0.840, -0.888],
                [2.021, 0.477, 0.000],
                [1.220, -0.840, 0.888],
                [1.220, -0.840, -0.888],
            ],
        )
        .unwrap()
    }

    #[test]
    fn bond_rule_forced_cases() {
        let h2 = Molecule::new(vec![1, 1], vec![[0.0; 3], [0.74, 0.0, 0.0]]).unwrap();
        let g = infer_bonds(&h2);
        assert_eq!(g.bonds(), &[(0, 1)]);

        let c2 = Molecule::new(vec![6, 6], vec![[0.0; 3], [3.0, 0.0, 0.0]]).unwrap();
        assert!(infer_bonds(&c2).bonds().is_empty());
    }

    #[test]
    fn methane_has_four_ch_bonds() {
        let g = infer_bonds(&methane());
        assert_eq!(g.bonds().len(), 4);
        assert!(g.bonds().iter().all(|&(a, _)| a == 0));
        assert_eq!(g.degree(0), 4);
        let report = valence_check(&g);
        assert!(report.pass);
    }

    #[test]
    fn bonded_oxygen_pair_fails_valence() {
        let o2 = Molecule::new(vec![8, 8], vec![[0.0; 3], [1.21, 0.0, 0.0]]).unwrap();
        let report = valence_check(&infer_bonds(&o2));
        assert!(!report.pass);
        assert_eq!(report.failures().count(), 2);
    }

    #[test]
    fn disconnected_heavy_graph_fails() {
        // two valence-correct water molecules far apart
        let w2 = Molecule::new(
            vec![8, 1, 1, 8, 1, 1],
            vec![
                [0.0, 0.0, 0.0],
                [0.7572, 0.5865, 0.0],
                [-0.7572, 0.5865, 0.0],
                [8.0, 0.0, 0.0],
                [8.7572, 0.5865, 0.0],
                [7.2428, 0.5865, 0.0],
            ],
        )
        .unwrap();
        let report = valence_check(&infer_bonds(&w2));
        assert!(!report.heavy_connected);
        assert!(!report.pass);
    }

    #[test]
    fn realistic_molecules_pass_valence() {
        for m in [ethanol(), dimethyl_ether()] {
            let report = valence_check(&infer_bonds(&m));
            assert!(report.pass, "failures: {:?}", report.failures().collect::<Vec<_>>());
        }
    }

    #[test]
    fn canonical_key_permutation_invariant() {
        let m = ethanol();
        let base = matching_key(&m, DEFAULT_BOND_TOLERANCE);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let mut perm: Vec<usize> = (0..m.len()).collect();
            perm.shuffle(&mut rng);
            let charges: Vec<u8> = perm.iter().map(|&i| m.charges()[i]).collect();
            let positions: Vec<[f64; 3]> = perm.iter().map(|&i| m.positions()[i]).collect();
            let pm = Molecule::new(charges, positions).unwrap();
            assert_eq!(matching_key(&pm, DEFAULT_BOND_TOLERANCE), base);
        }
    }

    #[test]
    fn cco_and_coc_chains_differ() {
        let a = matching_key(&ethanol(), DEFAULT_BOND_TOLERANCE);
        let b = matching_key(&dimethyl_ether(), DEFAULT_BOND_TOLERANCE);
        assert_ne!(a, b);
    }

    #[test]
    fn distinct_small_graphs_get_distinct_keys() {
        let co2 = Molecule::new(vec![6, 8, 8], vec![[0.0; 3], [1.16, 0.0, 0.0], [-1.16, 0.0, 0.0]])
            .unwrap();
        let hcn =
            Molecule::new(vec![6, 7, 1], vec![[0.0; 3], [1.156, 0.0, 0.0], [-1.064, 0.0, 0.0]])
                .unwrap();
        let mols = [methane(), ethanol(), dimethyl_ether(), co2, hcn];
        let keys: HashSet<CanonicalKey> =
            mols.iter().map(|m| matching_key(m, DEFAULT_BOND_TOLERANCE)).collect();
        assert_eq!(keys.len(), mols.len());
    }

    #[test]
    fn match_statistics_identity_and_empty() {
        let train = vec![ethanol(), dimethyl_ether()];
        let report = match_statistics(&train.clone(), &train, &[], DEFAULT_BOND_TOLERANCE);
        assert_eq!(report.stats.unique, 2);
        assert_eq!(report.stats.match_train, 2);
        assert_eq!(report.stats.new, 0);
        assert_eq!(report.stats.invalid, 0);

        let empty = match_statistics(&[], &train, &[], DEFAULT_BOND_TOLERANCE);
        assert_eq!(empty.stats, MatchStats::default());
    }

    #[test]
    fn match_statistics_synthetic_overlaps() {
        let co2 = Molecule::new(vec![6, 8, 8], vec![[0.0; 3], [1.16, 0.0, 0.0], [-1.16, 0.0, 0.0]])
            .unwrap();
        let o2 = Molecule::new(vec![8, 8], vec![[0.0; 3], [1.21, 0.0, 0.0]]).unwrap();
        // generated: ethanol twice (dedup), ether (test match), methane (new), o2 (invalid)
        let generated = vec![ethanol(), ethanol(), dimethyl_ether(), methane(), o2];
        let train = vec![ethanol(), co2];
        let test = vec![dimethyl_ether()];
        let r = match_statistics(&generated, &train, &test, DEFAULT_BOND_TOLERANCE);
        assert_eq!(r.stats.total, 5);
        assert_eq!(r.stats.invalid, 1);
        assert_eq!(r.stats.valid, 4);
        assert_eq!(r.stats.unique, 3);
        assert_eq!(r.stats.match_train, 1);
        assert_eq!(r.stats.match_test, 1);
        assert_eq!(r.stats.new, 1);
        // identical matched geometries: rmsd 0 for train and test columns
        assert!(r.rmsd.all_atoms[0].unwrap() < 1e-8);
        assert!(r.rmsd.all_atoms[1].unwrap() < 1e-8);
        assert!(r.rmsd.all_atoms[2].is_none());
        // machine report shape
        let text = r.machine();
        assert!(text.contains("match_train\t1"));
        assert!(text.contains("rmsd_heavy_atoms"));
    }

    #[test]
    fn rmsd_identical_is_zero() {
        let m = ethanol();
        assert!(kabsch_rmsd(&m, &m, false).unwrap() < 1e-10);
        assert!(kabsch_rmsd(&m, &m, true).unwrap() < 1e-10);
    }

    #[test]
    fn rmsd_removes_rigid_motion() {
        let m = ethanol();
        // 90 degrees about z plus a shift
        let rot = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let moved = apply_rigid(&m, &rot, [1.0, 2.0, 3.0]);
        assert!(kabsch_rmsd(&m, &moved, false).unwrap() < 1e-8);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let rot = random_rotation(&mut rng);
            let moved = apply_rigid(&m, &rot, [0.3, -0.7, 2.0]);
            assert!(kabsch_rmsd(&m, &moved, false).unwrap() < 1e-8);
            assert!(kabsch_rmsd_matched(&m, &moved, false).unwrap() < 1e-6);
        }
    }

    #[test]
    fn rmsd_scaled_square_closed_form() {
        // unit square vs the same square scaled by 1.1:
        // rmsd = 0.1 * point radius = 0.1 * sqrt(0.5)
        let square = |s: f64| {
            Molecule::new(
                vec![6, 6, 6, 6],
                vec![
                    [s * 0.5, s * 0.5, 0.0],
                    [s * -0.5, s * 0.5, 0.0],
                    [s * -0.5, s * -0.5, 0.0],
                    [s * 0.5, s * -0.5, 0.0],
                ],
            )
            .unwrap()
        };
        let r = kabsch_rmsd(&square(1.0), &square(1.1), false).unwrap();
        assert!((r - 0.070711).abs() < 1e-6, "rmsd {r}");
    }

    #[test]
    fn rmsd_symmetry_and_linear_molecules() {
        let hcn =
            Molecule::new(vec![6, 7, 1], vec![[0.0; 3], [1.156, 0.0, 0.0], [-1.064, 0.0, 0.0]])
                .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rot = random_rotation(&mut rng);
        let moved = apply_rigid(&hcn, &rot, [0.5, 0.5, -0.5]);
        // degenerate (collinear) configurations still superpose to zero
        assert!(kabsch_rmsd(&hcn, &moved, false).unwrap() < 1e-8);
        let ab = kabsch_rmsd(&ethanol(), &dimethyl_ether(), false).unwrap();
        let ba = kabsch_rmsd(&dimethyl_ether(), &ethanol(), false).unwrap();
        assert!((ab - ba).abs() < 1e-10);
    }

    #[test]
    fn rmsd_heavy_only_ignores_hydrogen_displacement() {
        let m = ethanol();
        let mut positions = m.positions().to_vec();
        positions[8] = [2.2, -0.4, 0.3]; // move the hydroxyl hydrogen
        let perturbed = Molecule::new(m.charges().to_vec(), positions).unwrap();
        assert!(kabsch_rmsd(&m, &perturbed, true).unwrap() < 1e-10);
        assert!(kabsch_rmsd(&m, &perturbed, false).unwrap() > 0.05);
    }

    #[test]
    fn rmsd_rejects_mismatches() {
        let m = ethanol();
        let h2 = Molecule::new(vec![1, 1], vec![[0.0; 3], [0.74, 0.0, 0.0]]).unwrap();
        assert!(matches!(kabsch_rmsd(&m, &h2, false), Err(AnalysisError::CountMismatch(_, _))));
        let co2 = Molecule::new(vec![6, 8, 8], vec![[0.0; 3], [1.16, 0.0, 0.0], [-1.16, 0.0, 0.0]])
            .unwrap();
        let cnh =
            Molecule::new(vec![6, 7, 1], vec![[0.0; 3], [1.156, 0.0, 0.0], [-1.064, 0.0, 0.0]])
                .unwrap();
        assert!(matches!(kabsch_rmsd(&co2, &cnh, false), Err(AnalysisError::ChargeMismatch)));
    }

    #[test]
    fn matched_rmsd_handles_permuted_atoms() {
        let m = ethanol();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rot = random_rotation(&mut rng);
        let moved = apply_rigid(&m, &rot, [1.0, 0.0, -1.0]);
        // permute atoms within element classes
        let perm = [1usize, 0, 2, 5, 3, 4, 7, 8, 6];
        let charges: Vec<u8> = perm.iter().map(|&i| moved.charges()[i]).collect();
        let positions: Vec<[f64; 3]> = perm.iter().map(|&i| moved.positions()[i]).collect();
        let shuffled = Molecule::new(charges, positions).unwrap();
        assert!(kabsch_rmsd_matched(&m, &shuffled, false).unwrap() < 1e-6);
        assert!(kabsch_rmsd_matched(&m, &shuffled, true).unwrap() < 1e-6);
    }
}
