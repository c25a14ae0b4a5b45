use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::fmt;

use super::{History, OpKind};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ConstructionError {
    /// A completed write carries no timestamp.
    MissingTimestamp {
        op: usize,
    },
    DuplicateTimestamp {
        a: usize,
        b: usize,
    },
    /// Two writes wrote the same value, so reads cannot be attributed.
    AmbiguousValue {
        a: usize,
        b: usize,
    },
    /// Writes of the absent value cannot be told apart from the initial value.
    AbsentWrite {
        op: usize,
    },
    /// A read returned a value no included write wrote.
    UnknownValue {
        op: usize,
    },
    /// The constructed order puts `later` before `earlier` although
    /// `earlier` finished before `later` started.
    RealTime {
        earlier: usize,
        later: usize,
    },
}

impl fmt::Display for ConstructionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConstructionError::MissingTimestamp { op } => write!(f, "write {op} has no timestamp"),
            ConstructionError::DuplicateTimestamp { a, b } => {
                write!(f, "writes {a} and {b} share a timestamp")
            }
            ConstructionError::AmbiguousValue { a, b } => write!(f, "writes {a} and {b} wrote the same value"),
            ConstructionError::AbsentWrite { op } => write!(f, "write {op} writes the absent value"),
            ConstructionError::UnknownValue { op } => write!(f, "read {op} returned a value nobody wrote"),
            ConstructionError::RealTime { earlier, later } => {
                write!(f, "operation {earlier} precedes {later} in real time but is ordered after it")
            }
        }
    }
}

impl core::error::Error for ConstructionError {}

/// Orders writes by timestamp, puts reads of the initial value first and
/// every other read after the write it observed (reads of one value keep
/// their invocation order), then validates real-time precedence.
///
/// Pending writes are included only when some read observed them.
pub fn check_construction(h: &History) -> Result<Vec<usize>, ConstructionError> {
    let read_values: BTreeMap<u64, usize> = h
        .ops
        .iter()
        .enumerate()
        .filter(|(_, o)| o.kind == OpKind::Read && o.is_complete())
        .filter_map(|(i, o)| o.value.map(|v| (v, i)))
        .collect();
    let mut writes: Vec<(u64, usize)> = Vec::new();
    let mut by_value: BTreeMap<u64, usize> = BTreeMap::new();
    for (i, o) in h.ops.iter().enumerate() {
        if o.kind != OpKind::Write {
            continue;
        }
        let Some(v) = o.value else {
            return Err(ConstructionError::AbsentWrite { op: i });
        };
        if !o.is_complete() && !read_values.contains_key(&v) {
            continue;
        }
        let Some(ts) = o.ts else {
            return Err(ConstructionError::MissingTimestamp { op: i });
        };
        if let Some(&prev) = by_value.get(&v) {
            return Err(ConstructionError::AmbiguousValue { a: prev, b: i });
        }
        by_value.insert(v, i);
        writes.push((ts, i));
    }
    writes.sort();
    for w in writes.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(ConstructionError::DuplicateTimestamp { a: w[0].1, b: w[1].1 });
        }
    }

    let mut initial: Vec<usize> = Vec::new();
    let mut after: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, o) in h.ops.iter().enumerate() {
        if o.kind != OpKind::Read || !o.is_complete() {
            continue;
        }
        match o.value {
            None => initial.push(i),
            Some(v) => match by_value.get(&v) {
                Some(&w) => after.entry(w).or_default().push(i),
                None => return Err(ConstructionError::UnknownValue { op: i }),
            },
        }
    }
    let key = |i: &usize| (h.ops[*i].invoke, h.ops[*i].response, *i);
    initial.sort_by_key(key);
    let mut order = initial;
    for (_, w) in &writes {
        order.push(*w);
        if let Some(mut reads) = after.remove(w) {
            reads.sort_by_key(key);
            order.extend(reads);
        }
    }

    // an op ordered after one that started later than it finished is a
    // real-time inversion
    let mut latest: Option<usize> = None;
    for &i in &order {
        if let (Some(l), Some(resp)) = (latest, h.ops[i].response)
            && resp < h.ops[l].invoke
        {
            return Err(ConstructionError::RealTime { earlier: i, later: l });
        }
        if latest.is_none_or(|l| h.ops[i].invoke > h.ops[l].invoke) {
            latest = Some(i);
        }
    }
    Ok(order)
}
