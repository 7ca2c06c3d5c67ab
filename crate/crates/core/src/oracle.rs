//! Ground truth for small scenes: exhaustive minimization of the energy,
//! exact Gibbs marginals, and checkers for the compatibility and transitivity
//! rules.
//!
//! Nothing here goes through the factor graph or the tape. Pairs and triples
//! are enumerated directly from participant indices.

use serde::{Deserialize, Serialize};

use crate::car::{Labeling, MarginalSet, Penalties};
use crate::error::{Error, Result};
use crate::togn::ScoreSet;

/// Largest assignment space the exhaustive routines accept.
pub const MAX_ASSIGNMENTS: u128 = 10_000_000;

/// Symmetric table of action pairs allowed to interact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompatTable {
    classes: usize,
    allowed: Vec<bool>,
}

impl CompatTable {
    pub fn new(classes: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut allowed = vec![false; classes * classes];
        for &(a, b) in pairs {
            if a >= classes || b >= classes {
                return Err(Error::InvalidArgument(format!(
                    "compatible pair ({a}, {b}) outside {classes} classes"
                )));
            }
            allowed[a * classes + b] = true;
            allowed[b * classes + a] = true;
        }
        Ok(Self { classes, allowed })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn compatible(&self, a: usize, b: usize) -> bool {
        self.allowed[a * self.classes + b]
    }

    /// Allowed pairs `a <= b`.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        (0..self.classes)
            .flat_map(|a| (a..self.classes).map(move |b| (a, b)))
            .filter(|&(a, b)| self.compatible(a, b))
            .collect()
    }
}

fn slot_of(n: usize, u: usize, v: usize) -> usize {
    let (u, v) = (u.min(v), u.max(v));
    // pairs before row u, then the offset within the row
    (0..u).map(|r| n - r - 1).sum::<usize>() + (v - u - 1)
}

fn participants_of(z_len: usize) -> Option<usize> {
    (2..).take_while(|n| n * (n - 1) / 2 <= z_len).find(|n| n * (n - 1) / 2 == z_len)
}

fn labeling_size(labeling: &Labeling) -> Result<usize> {
    let n = labeling.y.len();
    if n < 2 || labeling.z.len() != n * (n - 1) / 2 {
        return Err(Error::InvalidArgument(format!(
            "labeling with {} people and {} relation bits",
            n,
            labeling.z.len()
        )));
    }
    Ok(n)
}

/// Energy of `(y, z)` summed term by term.
pub fn assignment_energy(
    y: &[usize],
    z: &[u8],
    scores: &ScoreSet,
    penalties: &Penalties,
) -> f64 {
    let n = y.len();
    let mut e = 0.0;
    for i in 0..n {
        e -= scores.actions[i][y[i]];
    }
    for j in 0..n {
        for k in j + 1..n {
            let s = slot_of(n, j, k);
            e -= scores.relations[s][z[s] as usize];
            if z[s] == 1 {
                e += 0.5 * (penalties.compat.get(y[j], y[k]) + penalties.compat.get(y[k], y[j]));
            }
        }
    }
    for r in 0..n {
        for s in r + 1..n {
            for t in s + 1..n {
                let ones = z[slot_of(n, r, s)] + z[slot_of(n, s, t)] + z[slot_of(n, r, t)];
                if ones == 2 {
                    e += penalties.trans;
                }
            }
        }
    }
    e
}

/// Number of joint assignments for `n` people over `classes` actions.
pub fn space_size(n: usize, classes: usize) -> u128 {
    let pairs = (n * n.saturating_sub(1) / 2) as u32;
    (classes as u128).saturating_pow(n as u32).saturating_mul(2u128.saturating_pow(pairs))
}

fn check_inputs(scores: &ScoreSet, penalties: &Penalties) -> Result<(usize, usize)> {
    let n = scores.actions.len();
    let classes = penalties.classes();
    if n < 2 || scores.relations.len() != n * (n - 1) / 2 {
        return Err(Error::InvalidArgument(format!(
            "scores for {n} people with {} relations",
            scores.relations.len()
        )));
    }
    if scores.actions.iter().any(|a| a.len() != classes) || scores.relations.iter().any(|r| r.len() != 2) {
        return Err(Error::InvalidArgument("score lengths do not match class counts".into()));
    }
    let size = space_size(n, classes);
    if size > MAX_ASSIGNMENTS {
        return Err(Error::StateSpaceTooLarge {
            size,
            limit: MAX_ASSIGNMENTS,
        });
    }
    Ok((n, classes))
}

/// Visits every `(y, z)` in lexicographic order of the digit string
/// `y_0 .. y_{n-1} z_0 .. z_{P-1}`.
fn for_each_assignment(n: usize, classes: usize, mut visit: impl FnMut(&[usize], &[u8])) {
    let pairs = n * (n - 1) / 2;
    let mut y = vec![0usize; n];
    let mut z = vec![0u8; pairs];
    loop {
        visit(&y, &z);
        // odometer, last digit fastest
        let mut carry = true;
        for bit in z.iter_mut().rev() {
            if *bit == 0 {
                *bit = 1;
                carry = false;
                break;
            }
            *bit = 0;
        }
        if carry {
            for digit in y.iter_mut().rev() {
                if *digit + 1 < classes {
                    *digit += 1;
                    carry = false;
                    break;
                }
                *digit = 0;
            }
        }
        if carry {
            return;
        }
    }
}

/// Global minimizer of the energy; the first minimizer in enumeration order
/// wins ties.
pub fn brute_force_map(scores: &ScoreSet, penalties: &Penalties) -> Result<(Labeling, f64)> {
    let (n, classes) = check_inputs(scores, penalties)?;
    let mut best: Option<(Labeling, f64)> = None;
    for_each_assignment(n, classes, |y, z| {
        let e = assignment_energy(y, z, scores, penalties);
        if best.as_ref().is_none_or(|(_, b)| e < *b) {
            best = Some((
                Labeling {
                    y: y.to_vec(),
                    z: z.to_vec(),
                },
                e,
            ));
        }
    });
    Ok(best.expect("space is nonempty"))
}

/// Exact marginals of `P(y, z) ∝ exp(-E(y, z))`.
pub fn exact_marginals(scores: &ScoreSet, penalties: &Penalties) -> Result<MarginalSet> {
    let (n, classes) = check_inputs(scores, penalties)?;
    let mut min_e = f64::INFINITY;
    for_each_assignment(n, classes, |y, z| {
        min_e = min_e.min(assignment_energy(y, z, scores, penalties));
    });
    let pairs = n * (n - 1) / 2;
    let mut actions = vec![vec![0.0; classes]; n];
    let mut relations = vec![vec![0.0; 2]; pairs];
    let mut total = 0.0;
    for_each_assignment(n, classes, |y, z| {
        let w = (min_e - assignment_energy(y, z, scores, penalties)).exp();
        total += w;
        for (i, &yi) in y.iter().enumerate() {
            actions[i][yi] += w;
        }
        for (s, &zs) in z.iter().enumerate() {
            relations[s][zs as usize] += w;
        }
    });
    for v in actions.iter_mut().chain(relations.iter_mut()) {
        for p in v.iter_mut() {
            *p /= total;
        }
    }
    Ok(MarginalSet { actions, relations })
}

/// L1 distance between corresponding marginals, actions first then pairs.
pub fn marginal_l1(a: &MarginalSet, b: &MarginalSet) -> Vec<f64> {
    a.actions
        .iter()
        .zip(&b.actions)
        .chain(a.relations.iter().zip(&b.relations))
        .map(|(p, q)| p.iter().zip(q).map(|(x, y)| (x - y).abs()).sum())
        .collect()
}

/// Triples `r < s < t` with exactly two interacting pairs.
pub fn check_transitivity(labeling: &Labeling) -> Result<Vec<(usize, usize, usize)>> {
    let n = labeling_size(labeling)?;
    let z = &labeling.z;
    let mut out = Vec::new();
    for r in 0..n {
        for s in r + 1..n {
            for t in s + 1..n {
                let ones = z[slot_of(n, r, s)] + z[slot_of(n, s, t)] + z[slot_of(n, r, t)];
                if ones == 2 {
                    out.push((r, s, t));
                }
            }
        }
    }
    Ok(out)
}

/// Interacting pairs whose actions the table does not allow together.
pub fn check_compatibility(labeling: &Labeling, table: &CompatTable) -> Result<Vec<(usize, usize)>> {
    let n = labeling_size(labeling)?;
    if let Some(bad) = labeling.y.iter().find(|&&y| y >= table.classes()) {
        return Err(Error::InvalidArgument(format!(
            "action {bad} outside the {} classes of the table",
            table.classes()
        )));
    }
    let mut out = Vec::new();
    for j in 0..n {
        for k in j + 1..n {
            if labeling.z[slot_of(n, j, k)] == 1 && !table.compatible(labeling.y[j], labeling.y[k]) {
                out.push((j, k));
            }
        }
    }
    Ok(out)
}

/// Connected components of the interaction graph, each sorted, ordered by
/// smallest member.
pub fn groups_from_z(z: &[u8]) -> Result<Vec<Vec<usize>>> {
    let n = participants_of(z.len()).ok_or_else(|| {
        Error::InvalidArgument(format!("{} relation bits match no participant count", z.len()))
    })?;
    let mut parent: Vec<usize> = (0..n).collect();
    fn root(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for u in 0..n {
        for v in u + 1..n {
            if z[slot_of(n, u, v)] == 1 {
                let (a, b) = (root(&mut parent, u), root(&mut parent, v));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut index_of_root = vec![usize::MAX; n];
    for person in 0..n {
        let r = root(&mut parent, person);
        if index_of_root[r] == usize::MAX {
            index_of_root[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[index_of_root[r]].push(person);
    }
    Ok(groups)
}

/// True when every group of the partition is fully connected in `z`.
pub fn groups_are_cliques(z: &[u8], groups: &[Vec<usize>]) -> bool {
    let Some(n) = participants_of(z.len()) else {
        return false;
    };
    groups.iter().all(|g| {
        g.iter()
            .enumerate()
            .all(|(a, &u)| g[a + 1..].iter().all(|&v| z[slot_of(n, u, v)] == 1))
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub compat_violations: Vec<(usize, usize)>,
    pub trans_violations: Vec<(usize, usize, usize)>,
    pub groups: Vec<Vec<usize>>,
}

impl ConsistencyReport {
    pub fn new(labeling: &Labeling, table: &CompatTable) -> Result<Self> {
        Ok(Self {
            compat_violations: check_compatibility(labeling, table)?,
            trans_violations: check_transitivity(labeling)?,
            groups: groups_from_z(&labeling.z)?,
        })
    }

    pub fn is_consistent(&self) -> bool {
        self.compat_violations.is_empty() && self.trans_violations.is_empty()
    }
}
