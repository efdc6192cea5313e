//! Jigsaw permutation sets.
//!
//! A set of `P` tile permutations is chosen greedily so that the smallest
//! pairwise Hamming distance stays as large as possible. The identity is
//! always entry 0: it is the label of every ordered image.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};

/// Candidate pools larger than this are replaced by a seeded sample.
pub const MAX_CANDIDATE_POOL: usize = 500_000;

/// Bijection on `0..n`; position `i` of a recomposed grid holds tile `order[i]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Permutation {
    order: Vec<u8>,
}

impl Permutation {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let n = order.len();
        if n == 0 || n > u8::MAX as usize + 1 {
            return invalid(format!("permutation length {} outside 1..=256", n));
        }
        let mut seen = vec![false; n];
        for &v in &order {
            if v >= n || std::mem::replace(&mut seen[v], true) {
                return invalid(format!("{:?} is not a bijection on 0..{}", order, n));
            }
        }
        Ok(Self {
            order: order.into_iter().map(|v| v as u8).collect(),
        })
    }

    pub fn identity(n: usize) -> Self {
        Self::new((0..n).collect()).expect("identity is a bijection")
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn get(&self, i: usize) -> usize {
        self.order[i] as usize
    }

    pub fn order(&self) -> Vec<usize> {
        self.order.iter().map(|&v| v as usize).collect()
    }

    pub fn is_identity(&self) -> bool {
        self.order.iter().enumerate().all(|(i, &v)| i == v as usize)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0u8; self.order.len()];
        for (i, &v) in self.order.iter().enumerate() {
            inv[v as usize] = i as u8;
        }
        Self { order: inv }
    }
}

impl fmt::Display for Permutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.order.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{}", v)?;
        }
        Ok(())
    }
}

fn distance(a: &[u8], b: &[u8]) -> u8 {
    a.iter().zip(b).filter(|(x, y)| x != y).count() as u8
}

/// Number of grid positions at which two permutations place different tiles.
pub fn hamming(a: &Permutation, b: &Permutation) -> Result<usize> {
    if a.len() != b.len() {
        return invalid(format!("hamming on permutations of length {} and {}", a.len(), b.len()));
    }
    Ok(distance(&a.order, &b.order) as usize)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PermutationSet {
    n_tiles: usize,
    entries: Vec<Permutation>,
    seed: u64,
    /// `None` for a singleton set (no pairs).
    min_pairwise: Option<usize>,
}

impl PermutationSet {
    /// Validate and wrap a list of permutations; `min_pairwise` is recomputed.
    pub fn from_entries(n_tiles: usize, entries: Vec<Permutation>, seed: u64) -> Result<Self> {
        if entries.is_empty() {
            return invalid("permutation set is empty");
        }
        if let Some(bad) = entries.iter().find(|p| p.len() != n_tiles) {
            return invalid(format!("entry of length {} in a {}-tile set", bad.len(), n_tiles));
        }
        if !entries[0].is_identity() {
            return invalid("entry 0 must be the identity permutation");
        }
        let distinct: HashSet<&Permutation> = entries.iter().collect();
        if distinct.len() != entries.len() {
            return invalid("permutation set contains duplicate entries");
        }
        let min_pairwise = pairwise(&entries).0;
        Ok(Self {
            n_tiles,
            entries,
            seed,
            min_pairwise,
        })
    }

    pub fn n_tiles(&self) -> usize {
        self.n_tiles
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Permutation] {
        &self.entries
    }

    pub fn get(&self, index: usize) -> Result<&Permutation> {
        self.entries
            .get(index)
            .ok_or_else(|| Error::InvalidArgument(format!("permutation index {} outside 0..{}", index, self.len())))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn min_pairwise(&self) -> Option<usize> {
        self.min_pairwise
    }

    /// Text form: header `n_tiles P seed`, then one permutation per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {} {}\n", self.n_tiles, self.len(), self.seed);
        for p in &self.entries {
            s.push_str(&p.to_string());
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, message: String| Error::Format {
            path: "<permutation set>".into(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (hl, header) = lines.next().ok_or_else(|| bad(1, "missing header".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(bad(hl + 1, format!("header needs `n_tiles P seed`, got {:?}", header)));
        }
        let parse = |s: &str| s.parse::<u64>().map_err(|e| bad(hl + 1, format!("{:?}: {}", s, e)));
        let (n_tiles, count, seed) = (parse(fields[0])? as usize, parse(fields[1])? as usize, parse(fields[2])?);
        let mut entries = Vec::with_capacity(count);
        for (ln, line) in lines {
            let order = line
                .split_whitespace()
                .map(|t| t.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(ln + 1, e.to_string()))?;
            if order.len() != n_tiles {
                return Err(bad(ln + 1, format!("expected {} indices, got {}", n_tiles, order.len())));
            }
            entries.push(Permutation::new(order).map_err(|e| bad(ln + 1, e.to_string()))?);
        }
        if entries.len() != count {
            return Err(bad(hl + 1, format!("header announces {} permutations, found {}", count, entries.len())));
        }
        Self::from_entries(n_tiles, entries, seed).map_err(|e| bad(hl + 1, e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Format { line, message, .. } => Error::Format {
                path: path.display().to_string(),
                line,
                message,
            },
            other => other,
        })
    }
}

/// Minimum and mean pairwise Hamming distance (both `None` with fewer than two entries).
fn pairwise(entries: &[Permutation]) -> (Option<usize>, Option<f64>) {
    let mut min = None::<usize>;
    let (mut sum, mut pairs) = (0u64, 0u64);
    for i in 0..entries.len() {
        for j in i + 1..entries.len() {
            let d = distance(&entries[i].order, &entries[j].order) as usize;
            min = Some(min.map_or(d, |m| m.min(d)));
            sum += d as u64;
            pairs += 1;
        }
    }
    (min, (pairs > 0).then(|| sum as f64 / pairs as f64))
}

fn factorial_capped(n: usize, cap: usize) -> Option<usize> {
    (1..=n).try_fold(1usize, |acc, k| acc.checked_mul(k).filter(|&v| v <= cap))
}

/// Advance `p` to its lexicographic successor; false when `p` was the last.
fn next_permutation(p: &mut [u8]) -> bool {
    let Some(i) = p.windows(2).rposition(|w| w[0] < w[1]) else {
        return false;
    };
    let j = p.iter().rposition(|&v| v > p[i]).expect("pivot has a successor");
    p.swap(i, j);
    p[i + 1..].reverse();
    true
}

/// Flat, lexicographically sorted candidate pool (stride `n`).
fn candidate_pool(n: usize, seed: u64) -> Vec<u8> {
    if factorial_capped(n, MAX_CANDIDATE_POOL).is_some() {
        let mut cur: Vec<u8> = (0..n as u8).collect();
        let mut flat = cur.clone();
        while next_permutation(&mut cur) {
            flat.extend_from_slice(&cur);
        }
        return flat;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let identity: Vec<u8> = (0..n as u8).collect();
    let mut seen: HashSet<Vec<u8>> = HashSet::with_capacity(MAX_CANDIDATE_POOL + 1);
    seen.insert(identity.clone());
    let mut drawn = Vec::with_capacity(MAX_CANDIDATE_POOL + 1);
    drawn.push(identity.clone());
    let mut p = identity;
    while drawn.len() < MAX_CANDIDATE_POOL + 1 {
        p.shuffle(&mut rng);
        if seen.insert(p.clone()) {
            drawn.push(p.clone());
        }
    }
    drawn.sort_unstable();
    drawn.concat()
}

/// Greedy max-min Hamming selection of `p` permutations of `n_tiles` tiles.
///
/// Starts from the identity and repeatedly adds the candidate whose minimum
/// distance to the selected set is largest, breaking ties towards the
/// lexicographically smallest candidate. The pool is every permutation when
/// `n_tiles! <= 500_000` and otherwise the identity plus 500,000 distinct
/// permutations drawn uniformly with `seed`.
pub fn generate_permutation_set(n_tiles: usize, p: usize, seed: u64) -> Result<PermutationSet> {
    if n_tiles == 0 || n_tiles > 256 {
        return invalid(format!("n_tiles must be in 1..=256, got {}", n_tiles));
    }
    if p == 0 {
        return invalid("P must be at least 1");
    }
    let pool_size = factorial_capped(n_tiles, MAX_CANDIDATE_POOL).unwrap_or(MAX_CANDIDATE_POOL + 1);
    if p > pool_size {
        return invalid(format!(
            "P={} exceeds the {} available permutations of {} tiles",
            p, pool_size, n_tiles
        ));
    }
    let pool = candidate_pool(n_tiles, seed);
    let count = pool.len() / n_tiles;
    let identity_idx = (0..count)
        .find(|&i| pool[i * n_tiles..(i + 1) * n_tiles].iter().enumerate().all(|(k, &v)| k == v as usize))
        .expect("pool contains the identity");

    let cand = |i: usize| &pool[i * n_tiles..(i + 1) * n_tiles];
    let mut min_dist: Vec<u8> = (0..count).map(|i| distance(cand(i), cand(identity_idx))).collect();
    let mut chosen = vec![identity_idx];
    let mut min_pairwise = None::<usize>;
    while chosen.len() < p {
        let mut best = usize::MAX;
        let mut best_d = 0u8;
        for (i, &d) in min_dist.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        debug_assert!(best != usize::MAX, "pool exhausted");
        min_pairwise = Some(min_pairwise.map_or(best_d as usize, |m| m.min(best_d as usize)));
        chosen.push(best);
        let picked = cand(best).to_vec();
        for (i, d) in min_dist.iter_mut().enumerate() {
            if *d > 0 {
                *d = (*d).min(distance(cand(i), &picked));
            }
        }
    }
    let entries = chosen
        .iter()
        .map(|&i| Permutation {
            order: cand(i).to_vec(),
        })
        .collect();
    Ok(PermutationSet {
        n_tiles,
        entries,
        seed,
        min_pairwise,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditReport {
    pub distinct: bool,
    pub identity_first: bool,
    pub lengths_consistent: bool,
    pub min_pairwise: Option<usize>,
    pub mean_pairwise: Option<f64>,
    /// Whether the set's recorded minimum equals the recomputed one.
    pub recorded_min_matches: bool,
}

impl AuditReport {
    pub fn ok(&self) -> bool {
        self.distinct && self.identity_first && self.lengths_consistent && self.recorded_min_matches
    }
}

/// Exhaustive pairwise audit of a set. Reports violations instead of failing.
pub fn audit_set(s: &PermutationSet) -> AuditReport {
    audit_entries(s.n_tiles, &s.entries, s.min_pairwise)
}

pub fn audit_entries(n_tiles: usize, entries: &[Permutation], recorded_min: Option<usize>) -> AuditReport {
    let distinct = entries.iter().collect::<HashSet<_>>().len() == entries.len();
    let lengths_consistent = entries.iter().all(|p| p.len() == n_tiles);
    let identity_first = entries.first().is_some_and(Permutation::is_identity);
    let (min_pairwise, mean_pairwise) = pairwise(entries);
    AuditReport {
        distinct,
        identity_first,
        lengths_consistent,
        min_pairwise,
        mean_pairwise,
        recorded_min_matches: min_pairwise == recorded_min,
    }
}

/// The default 3×3, P=30 set, built once per test binary.
#[cfg(test)]
pub(crate) fn shared_test_set() -> &'static PermutationSet {
    static SET: std::sync::OnceLock<PermutationSet> = std::sync::OnceLock::new();
    SET.get_or_init(|| generate_permutation_set(9, 30, 0).expect("default set"))
}
