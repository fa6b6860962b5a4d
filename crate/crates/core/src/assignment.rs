//! Defender-to-attacker assignment.
//!
//! `I_j` holds the attackers that beat defender `j` one-on-one and `P_j` the
//! attacker pairs that beat it two-on-one. The integer program
//!
//! ```text
//! maximize   sum e_ij
//! subject to e_ij in {0, 1}
//!            sum_i e_ij <= 2            for every defender j
//!            sum_j e_ij <= 1            for every attacker i
//!            e_sj = 0                   for s in I_j
//!            e_kj + e_lj <= 1           for (k, l) in P_j
//! ```
//!
//! is solved exactly by depth-first branch and bound. Among optimal
//! assignments the one whose list of assigned `(i, j)` pairs is
//! lexicographically smallest wins, i.e. earlier attackers claim earlier
//! defenders.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use thiserror::Error;

use crate::games::GameTubes;
use crate::grid::Scalar;
use crate::hji::in_tube;

#[derive(Debug, Error, PartialEq)]
pub enum AssignmentError {
    #[error("attacker index {index} out of range for {attackers} attackers")]
    AttackerIndex { index: usize, attackers: usize },
    #[error("pair ({0}, {1}) is not two distinct attackers")]
    BadPair(usize, usize),
    #[error("expected {expected} entries, got {actual}")]
    Shape { expected: usize, actual: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignmentInstance {
    attackers: usize,
    /// `I_j` per defender.
    beats_one: Vec<BTreeSet<usize>>,
    /// `P_j` per defender; pairs are stored with `k < l`.
    beats_pair: Vec<BTreeSet<(usize, usize)>>,
    active: Vec<bool>,
}

impl AssignmentInstance {
    /// An instance with all attackers active and empty `I_j`, `P_j`.
    pub fn new(attackers: usize, defenders: usize) -> Self {
        AssignmentInstance {
            attackers,
            beats_one: vec![BTreeSet::new(); defenders],
            beats_pair: vec![BTreeSet::new(); defenders],
            active: vec![true; attackers],
        }
    }

    pub fn attackers(&self) -> usize {
        self.attackers
    }

    pub fn defenders(&self) -> usize {
        self.beats_one.len()
    }

    pub fn beats_one(&self, defender: usize) -> &BTreeSet<usize> {
        &self.beats_one[defender]
    }

    pub fn beats_pair(&self, defender: usize) -> &BTreeSet<(usize, usize)> {
        &self.beats_pair[defender]
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    fn check_attacker(&self, i: usize) -> Result<(), AssignmentError> {
        if i >= self.attackers {
            return Err(AssignmentError::AttackerIndex {
                index: i,
                attackers: self.attackers,
            });
        }
        Ok(())
    }

    /// Records that attacker `i` beats defender `j` one-on-one.
    pub fn add_single(&mut self, j: usize, i: usize) -> Result<(), AssignmentError> {
        self.check_attacker(i)?;
        if self.active[i] {
            self.beats_one[j].insert(i);
        }
        Ok(())
    }

    /// Records that attackers `k` and `l` together beat defender `j`.
    pub fn add_pair(&mut self, j: usize, k: usize, l: usize) -> Result<(), AssignmentError> {
        self.check_attacker(k)?;
        self.check_attacker(l)?;
        if k == l {
            return Err(AssignmentError::BadPair(k, l));
        }
        if self.active[k] && self.active[l] {
            self.beats_pair[j].insert((k.min(l), k.max(l)));
        }
        Ok(())
    }

    /// Removes an attacker from play, dropping it from every set.
    pub fn deactivate(&mut self, i: usize) -> Result<(), AssignmentError> {
        self.check_attacker(i)?;
        self.active[i] = false;
        for set in &mut self.beats_one {
            set.remove(&i);
        }
        for set in &mut self.beats_pair {
            set.retain(|&(k, l)| k != i && l != i);
        }
        Ok(())
    }

    fn may_take(&self, i: usize, j: usize) -> bool {
        self.active[i] && !self.beats_one[j].contains(&i)
    }

    fn may_pair(&self, j: usize, k: usize, l: usize) -> bool {
        !self.beats_pair[j].contains(&(k.min(l), k.max(l)))
    }

    /// Line format: `M N`, then `I j: i ...` and `P j: k,l ...` per defender
    /// and an optional `inactive: i ...` line. Indices are 0-based.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.attackers, self.defenders());
        let inactive: Vec<String> = (0..self.attackers)
            .filter(|&i| !self.active[i])
            .map(|i| i.to_string())
            .collect();
        if !inactive.is_empty() {
            let _ = writeln!(out, "inactive: {}", inactive.join(" "));
        }
        for j in 0..self.defenders() {
            let singles: Vec<String> = self.beats_one[j].iter().map(|i| i.to_string()).collect();
            let _ = writeln!(out, "I {j}: {}", singles.join(" ").trim_end());
            let pairs: Vec<String> = self.beats_pair[j]
                .iter()
                .map(|(k, l)| format!("{k},{l}"))
                .collect();
            let _ = writeln!(out, "P {j}: {}", pairs.join(" ").trim_end());
        }
        out.lines().map(|l| format!("{}\n", l.trim_end())).collect()
    }

    pub fn from_text(text: &str) -> Result<Self, AssignmentError> {
        let err = |line: usize, message: String| AssignmentError::Parse {
            line: line + 1,
            message,
        };
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (n0, header) = lines.next().ok_or_else(|| err(0, "empty input".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| err(n0, format!("bad count {t:?}"))))
            .collect::<Result<_, _>>()?;
        let [m, n] = dims[..] else {
            return Err(err(n0, "header must be \"M N\"".into()));
        };
        let mut inst = AssignmentInstance::new(m, n);
        let mut pending = Vec::new();
        for (no, line) in lines {
            let (head, body) = line
                .split_once(':')
                .ok_or_else(|| err(no, "missing ':'".into()))?;
            let mut words = head.split_whitespace();
            let kind = words.next().unwrap_or("");
            let index = |w: &str| -> Result<usize, AssignmentError> {
                w.parse().map_err(|_| err(no, format!("bad index {w:?}")))
            };
            match kind {
                "inactive" => {
                    for w in body.split_whitespace() {
                        inst.deactivate(index(w)?)?;
                    }
                }
                "I" | "P" => {
                    let j = index(words.next().ok_or_else(|| err(no, "missing defender".into()))?)?;
                    if j >= n {
                        return Err(err(no, format!("defender {j} out of range")));
                    }
                    pending.push((no, kind == "I", j, body.to_string()));
                }
                other => return Err(err(no, format!("unknown line kind {other:?}"))),
            }
        }
        // Sets are applied after the inactive list, wherever it appears.
        for (no, single, j, body) in pending {
            for w in body.split_whitespace() {
                if single {
                    let i = w.parse().map_err(|_| err(no, format!("bad index {w:?}")))?;
                    inst.add_single(j, i)?;
                } else {
                    let (k, l) = w
                        .split_once(',')
                        .ok_or_else(|| err(no, format!("bad pair {w:?}")))?;
                    let k = k.parse().map_err(|_| err(no, format!("bad pair {w:?}")))?;
                    let l = l.parse().map_err(|_| err(no, format!("bad pair {w:?}")))?;
                    inst.add_pair(j, k, l)?;
                }
            }
        }
        Ok(inst)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignmentResult {
    /// `e[i][j]`, attackers by defenders.
    pub e: Vec<Vec<bool>>,
    pub objective: usize,
}

impl AssignmentResult {
    pub fn empty(attackers: usize, defenders: usize) -> Self {
        AssignmentResult {
            e: vec![vec![false; defenders]; attackers],
            objective: 0,
        }
    }

    fn from_choice(choice: &[Option<usize>], defenders: usize) -> Self {
        let mut r = AssignmentResult::empty(choice.len(), defenders);
        for (i, c) in choice.iter().enumerate() {
            if let Some(j) = *c {
                r.e[i][j] = true;
                r.objective += 1;
            }
        }
        r
    }

    /// Attackers assigned to defender `j`, ascending.
    pub fn assigned_to(&self, j: usize) -> Vec<usize> {
        (0..self.e.len()).filter(|&i| self.e[i][j]).collect()
    }

    pub fn defender_of(&self, i: usize) -> Option<usize> {
        self.e[i].iter().position(|&x| x)
    }

    /// Assigned `(attacker, defender)` pairs in row-major order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, row) in self.e.iter().enumerate() {
            for (j, &x) in row.iter().enumerate() {
                if x {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// One `e i j` line per assigned pair.
    pub fn to_text(&self) -> String {
        self.pairs()
            .into_iter()
            .map(|(i, j)| format!("e {i} {j}\n"))
            .collect()
    }

    pub fn from_text(text: &str, attackers: usize, defenders: usize) -> Result<Self, AssignmentError> {
        let mut r = AssignmentResult::empty(attackers, defenders);
        for (no, line) in text.lines().enumerate() {
            let words: Vec<&str> = line.split_whitespace().collect();
            if words.is_empty() {
                continue;
            }
            let parsed = match words[..] {
                ["e", i, j] => i.parse::<usize>().ok().zip(j.parse::<usize>().ok()),
                _ => None,
            };
            let Some((i, j)) = parsed.filter(|&(i, j)| i < attackers && j < defenders) else {
                return Err(AssignmentError::Parse {
                    line: no + 1,
                    message: format!("expected \"e i j\" within bounds, got {line:?}"),
                });
            };
            if !r.e[i][j] {
                r.e[i][j] = true;
                r.objective += 1;
            }
        }
        Ok(r)
    }
}

/// A constraint violated by an assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Shape,
    Objective { claimed: usize, counted: usize },
    ColumnOverCapacity { defender: usize },
    RowOverCapacity { attacker: usize },
    LosingSingle { attacker: usize, defender: usize },
    LosingPair { pair: (usize, usize), defender: usize },
    Inactive { attacker: usize },
}

/// Checks every constraint of the program directly from the matrix.
pub fn validate(inst: &AssignmentInstance, r: &AssignmentResult) -> Result<(), Violation> {
    let (m, n) = (inst.attackers(), inst.defenders());
    if r.e.len() != m || r.e.iter().any(|row| row.len() != n) {
        return Err(Violation::Shape);
    }
    let counted = r.e.iter().flatten().filter(|&&x| x).count();
    if counted != r.objective {
        return Err(Violation::Objective {
            claimed: r.objective,
            counted,
        });
    }
    for j in 0..n {
        if (0..m).filter(|&i| r.e[i][j]).count() > 2 {
            return Err(Violation::ColumnOverCapacity { defender: j });
        }
        for &s in inst.beats_one(j) {
            if r.e[s][j] {
                return Err(Violation::LosingSingle {
                    attacker: s,
                    defender: j,
                });
            }
        }
        for &(k, l) in inst.beats_pair(j) {
            if r.e[k][j] && r.e[l][j] {
                return Err(Violation::LosingPair {
                    pair: (k, l),
                    defender: j,
                });
            }
        }
    }
    for i in 0..m {
        if r.e[i].iter().filter(|&&x| x).count() > 1 {
            return Err(Violation::RowOverCapacity { attacker: i });
        }
        if !inst.active[i] && r.e[i].iter().any(|&x| x) {
            return Err(Violation::Inactive { attacker: i });
        }
    }
    Ok(())
}

struct Search<'a> {
    inst: &'a AssignmentInstance,
    capacity: usize,
    /// Attackers with at least one admissible defender.
    candidates: Vec<usize>,
    choice: Vec<Option<usize>>,
    load: Vec<Vec<usize>>,
    best: Vec<Option<usize>>,
    best_count: usize,
}

impl Search<'_> {
    fn admissible(&self, i: usize, j: usize) -> bool {
        let load = &self.load[j];
        self.inst.may_take(i, j)
            && load.len() < self.capacity
            && load.iter().all(|&k| self.inst.may_pair(j, k, i))
    }

    fn run(&mut self, pos: usize, count: usize) {
        if count > self.best_count {
            self.best_count = count;
            self.best.clone_from(&self.choice);
        }
        if pos == self.candidates.len() {
            return;
        }
        let free: usize = self.load.iter().map(|l| self.capacity - l.len()).sum();
        let bound = count + free.min(self.candidates.len() - pos);
        // Ties cannot displace the incumbent, which comes first in order.
        if bound <= self.best_count {
            return;
        }
        let i = self.candidates[pos];
        for j in 0..self.inst.defenders() {
            if self.admissible(i, j) {
                self.choice[i] = Some(j);
                self.load[j].push(i);
                self.run(pos + 1, count + 1);
                self.load[j].pop();
                self.choice[i] = None;
            }
        }
        self.run(pos + 1, count);
    }
}

fn search(inst: &AssignmentInstance, capacity: usize) -> AssignmentResult {
    let candidates: Vec<usize> = (0..inst.attackers())
        .filter(|&i| (0..inst.defenders()).any(|j| inst.may_take(i, j)))
        .collect();
    let mut s = Search {
        inst,
        capacity,
        candidates,
        choice: vec![None; inst.attackers()],
        load: vec![Vec::new(); inst.defenders()],
        best: vec![None; inst.attackers()],
        best_count: 0,
    };
    s.run(0, 0);
    AssignmentResult::from_choice(&s.best, inst.defenders())
}

/// Exact optimum of the assignment program.
pub fn solve_mip(inst: &AssignmentInstance) -> AssignmentResult {
    search(inst, 2)
}

/// Kuhn's augmenting-path maximum matching restricted to `rows`, with
/// defenders marked `taken` unavailable.
fn matching_size(inst: &AssignmentInstance, rows: &[usize], taken: &[bool]) -> usize {
    fn augment(
        inst: &AssignmentInstance,
        i: usize,
        taken: &[bool],
        seen: &mut [bool],
        owner: &mut [Option<usize>],
    ) -> bool {
        for j in 0..inst.defenders() {
            if taken[j] || seen[j] || !inst.may_take(i, j) {
                continue;
            }
            seen[j] = true;
            if owner[j].is_none_or(|k| augment(inst, k, taken, seen, owner)) {
                owner[j] = Some(i);
                return true;
            }
        }
        false
    }
    let mut owner = vec![None; inst.defenders()];
    rows.iter()
        .filter(|&&i| {
            let mut seen = vec![false; inst.defenders()];
            augment(inst, i, taken, &mut seen, &mut owner)
        })
        .count()
}

/// Maximum-cardinality one-to-one matching over edges `i` not in `I_j`,
/// ignoring pair information; the lexicographically first maximum matching
/// is returned.
pub fn max_matching_baseline(inst: &AssignmentInstance) -> AssignmentResult {
    let m = inst.attackers();
    let rows: Vec<usize> = (0..m).collect();
    let mut taken = vec![false; inst.defenders()];
    let mut remaining = matching_size(inst, &rows, &taken);
    let mut choice = vec![None; m];
    for i in 0..m {
        if remaining == 0 {
            break;
        }
        for j in 0..inst.defenders() {
            if taken[j] || !inst.may_take(i, j) {
                continue;
            }
            taken[j] = true;
            if 1 + matching_size(inst, &rows[i + 1..], &taken) == remaining {
                choice[i] = Some(j);
                remaining -= 1;
                break;
            }
            taken[j] = false;
        }
    }
    AssignmentResult::from_choice(&choice, inst.defenders())
}

/// Builds `I_j` and `P_j` from tube membership at the given positions;
/// attackers with `active[i] == false` are left out.
pub fn build_instance(
    tubes: &GameTubes,
    attackers: &[[f64; 2]],
    defenders: &[[f64; 2]],
    active: &[bool],
) -> Result<AssignmentInstance, AssignmentError> {
    if active.len() != attackers.len() {
        return Err(AssignmentError::Shape {
            expected: attackers.len(),
            actual: active.len(),
        });
    }
    let mut inst = AssignmentInstance::new(attackers.len(), defenders.len());
    for (i, &a) in active.iter().enumerate() {
        if !a {
            inst.deactivate(i)?;
        }
    }
    for (j, d) in defenders.iter().enumerate() {
        for (i, a) in attackers.iter().enumerate() {
            if active[i] && beats_one(&tubes.tube11, *a, *d) {
                inst.add_single(j, i)?;
            }
        }
        for k in 0..attackers.len() {
            for l in k + 1..attackers.len() {
                if active[k] && active[l] && beats_pair(&tubes.tube21, attackers[k], attackers[l], *d)
                {
                    inst.add_pair(j, k, l)?;
                }
            }
        }
    }
    Ok(inst)
}

pub fn beats_one<T: Scalar>(tube11: &crate::grid::Field<T>, a: [f64; 2], d: [f64; 2]) -> bool {
    in_tube(tube11, &[a[0], a[1], d[0], d[1]]).inside
}

pub fn beats_pair<T: Scalar>(
    tube21: &crate::grid::Field<T>,
    a1: [f64; 2],
    a2: [f64; 2],
    d: [f64; 2],
) -> bool {
    in_tube(tube21, &[a1[0], a1[1], a2[0], a2[1], d[0], d[1]]).inside
}
