use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use super::{CheckError, History, Op, OpKind};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViolationWitness {
    /// A subset of operations that is already not linearizable and from which
    /// no operation can be removed without making it linearizable.
    pub core: Vec<usize>,
    /// Longest linearizable prefix the search reached.
    pub longest_prefix: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BruteVerdict {
    /// Indices into the history in linearization order.
    Linearizable(Vec<usize>),
    Violation(ViolationWitness),
}

impl BruteVerdict {
    pub fn is_linearizable(&self) -> bool {
        matches!(self, BruteVerdict::Linearizable(_))
    }
}

/// Exhaustive search over linearizations. Pending writes may take effect or
/// not; pending reads are ignored.
pub fn check_bruteforce(h: &History, bound: usize) -> Result<BruteVerdict, CheckError> {
    let considered: Vec<usize> = relevant(h);
    if considered.len() > bound {
        return Err(CheckError::TooLarge { ops: considered.len(), bound });
    }
    let mut s = Search::new(h, &considered);
    if s.run() {
        return Ok(BruteVerdict::Linearizable(s.order.iter().map(|&k| considered[k]).collect()));
    }
    let longest_prefix = s.best.iter().map(|&k| considered[k]).collect();
    Ok(BruteVerdict::Violation(ViolationWitness { core: minimal_core(h, &considered), longest_prefix }))
}

/// Shrinks a non-linearizable set of operations to a one-minimal one.
pub fn minimal_core(h: &History, ops: &[usize]) -> Vec<usize> {
    let mut core: Vec<usize> = ops.to_vec();
    let mut i = 0;
    while i < core.len() {
        let mut trial = core.clone();
        trial.remove(i);
        if !Search::new(h, &trial).run() {
            core = trial;
        } else {
            i += 1;
        }
    }
    core
}

fn relevant(h: &History) -> Vec<usize> {
    h.ops.iter().enumerate().filter(|(_, o)| o.is_complete() || o.kind == OpKind::Write).map(|(i, _)| i).collect()
}

struct Search<'a> {
    ops: Vec<&'a Op>,
    words: usize,
    dead: BTreeSet<(Vec<u64>, Option<u64>)>,
    order: Vec<usize>,
    best: Vec<usize>,
    required: usize,
}

impl<'a> Search<'a> {
    fn new(h: &'a History, idx: &[usize]) -> Self {
        let ops: Vec<&Op> = idx.iter().map(|&i| &h.ops[i]).collect();
        let required = ops.iter().filter(|o| o.is_complete()).count();
        Search {
            words: ops.len().div_ceil(64).max(1),
            ops,
            dead: BTreeSet::new(),
            order: Vec::new(),
            best: Vec::new(),
            required,
        }
    }

    fn run(&mut self) -> bool {
        let done = alloc::vec![0u64; self.words];
        self.dfs(done, None, 0)
    }

    fn dfs(&mut self, done: Vec<u64>, value: Option<u64>, completed: usize) -> bool {
        if completed == self.required {
            return true;
        }
        if self.dead.contains(&(done.clone(), value)) {
            return false;
        }
        let is_done = |i: usize| done[i / 64] >> (i % 64) & 1 == 1;
        // earliest response among remaining completed operations
        let horizon =
            (0..self.ops.len()).filter(|&i| !is_done(i)).filter_map(|i| self.ops[i].response).min().unwrap_or(u64::MAX);
        let mut cands: Vec<usize> =
            (0..self.ops.len()).filter(|&i| !is_done(i) && self.ops[i].invoke <= horizon).collect();
        cands.sort_by_key(|&i| (self.ops[i].invoke, i));
        for i in cands {
            let op = self.ops[i];
            let next = match op.kind {
                OpKind::Write => op.value,
                OpKind::Read if op.value == value => value,
                OpKind::Read => continue,
            };
            let mut d = done.clone();
            d[i / 64] |= 1 << (i % 64);
            self.order.push(i);
            if self.order.len() > self.best.len() {
                self.best = self.order.clone();
            }
            let c = completed + usize::from(op.is_complete());
            if self.dfs(d, next, c) {
                return true;
            }
            self.order.pop();
        }
        self.dead.insert((done, value));
        false
    }
}
