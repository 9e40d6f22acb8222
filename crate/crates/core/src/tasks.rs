//! Multi-task modular-arithmetic dataset and its deterministic split.
//!
//! One input space (all pairs `(x, y)` with `0 <= x, y < P`), three label
//! functions: addition, multiplication, and `x^2 + y^2`, all modulo `P`.
//! The train/test split is shared across tasks and reproducible from the
//! split seed alone; the exact algorithm is documented in `docs/format.md`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;

/// The three tasks, in the fixed order used for head indexing and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskId {
    Add = 0,
    Mul = 1,
    Quad = 2,
}

pub const N_TASKS: usize = 3;

impl TaskId {
    pub const ALL: [TaskId; N_TASKS] = [TaskId::Add, TaskId::Mul, TaskId::Quad];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Add => "add",
            TaskId::Mul => "mul",
            TaskId::Quad => "quad",
        }
    }

    pub fn from_index(i: usize) -> Option<TaskId> {
        TaskId::ALL.get(i).copied()
    }
}

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("modulus must be at least 2, got {0}")]
    BadModulus(u32),
    #[error("input ({x}, {y}) out of range for modulus {p}")]
    OutOfRange { x: u32, y: u32, p: u32 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// A labelled set of input pairs. `labels[t][i]` is the task-`t` label of
/// `pairs[i]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub modulus: u32,
    pub pairs: Vec<(u32, u32)>,
    pub labels: [Vec<u32>; N_TASKS],
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn from_pairs(modulus: u32, pairs: Vec<(u32, u32)>) -> Result<Self, TaskError> {
        let mut labels: [Vec<u32>; N_TASKS] = Default::default();
        for t in TaskId::ALL {
            labels[t.index()] = pairs
                .iter()
                .map(|&(x, y)| task_label(t, x, y, modulus))
                .collect::<Result<_, _>>()?;
        }
        Ok(Self {
            modulus,
            pairs,
            labels,
        })
    }
}

/// Label for a single pair: `(x+y) mod P`, `(x*y) mod P`, or
/// `(x^2+y^2) mod P`.
pub fn task_label(task: TaskId, x: u32, y: u32, p: u32) -> Result<u32, TaskError> {
    if p < 2 {
        return Err(TaskError::BadModulus(p));
    }
    if x >= p || y >= p {
        return Err(TaskError::OutOfRange { x, y, p });
    }
    let (x, y, p64) = (x as u64, y as u64, p as u64);
    let v = match task {
        TaskId::Add => (x + y) % p64,
        TaskId::Mul => (x * y) % p64,
        TaskId::Quad => (x * x + y * y) % p64,
    };
    Ok(v as u32)
}

/// Generate the full P^2 pair grid and split it into train and test.
///
/// The split is a seeded uniform permutation of the x-major pair order:
/// train takes the first `floor(P^2 / 2)` permuted pairs, test the rest.
/// The same split is shared by all three tasks.
pub fn generate(p: u32, split_seed: u64) -> Result<(Dataset, Dataset), TaskError> {
    if p < 2 {
        return Err(TaskError::BadModulus(p));
    }
    let total = (p as usize) * (p as usize);
    let mut pairs: Vec<(u32, u32)> = Vec::with_capacity(total);
    for x in 0..p {
        for y in 0..p {
            pairs.push((x, y));
        }
    }
    let mut rng = SplitMix64::new(split_seed);
    rng.shuffle(&mut pairs);
    let n_train = total / 2;
    let test_pairs = pairs.split_off(n_train);
    Ok((
        Dataset::from_pairs(p, pairs)?,
        Dataset::from_pairs(p, test_pairs)?,
    ))
}

/// Dump both splits as CSV with columns `x,y,add,mul,quad,split`.
pub fn write_csv(train: &Dataset, test: &Dataset, path: &Path) -> Result<(), TaskError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "x,y,add,mul,quad,split")?;
    for (ds, tag) in [(train, "train"), (test, "test")] {
        for (i, &(x, y)) in ds.pairs.iter().enumerate() {
            writeln!(
                f,
                "{},{},{},{},{},{}",
                x, y, ds.labels[0][i], ds.labels[1][i], ds.labels[2][i], tag
            )?;
        }
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn split_sizes_p97() {
        let (train, test) = generate(97, 7).unwrap();
        assert_eq!(train.len(), 4704);
        assert_eq!(test.len(), 4705);
        assert_eq!(train.len() + test.len(), 9409);
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let (train, test) = generate(97, 7).unwrap();
        let mut seen: HashSet<(u32, u32)> = HashSet::new();
        for &p in train.pairs.iter().chain(test.pairs.iter()) {
            assert!(seen.insert(p), "duplicate pair {p:?}");
        }
        assert_eq!(seen.len(), 9409);
    }

    #[test]
    fn labels_match_direct_arithmetic_exhaustively() {
        let (train, test) = generate(97, 7).unwrap();
        for ds in [&train, &test] {
            for (i, &(x, y)) in ds.pairs.iter().enumerate() {
                assert_eq!(ds.labels[0][i], (x + y) % 97);
                assert_eq!(ds.labels[1][i], (x * y) % 97);
                assert_eq!(ds.labels[2][i], (x * x + y * y) % 97);
            }
        }
    }

    #[test]
    fn label_examples() {
        assert_eq!(task_label(TaskId::Add, 1, 2, 97).unwrap(), 3);
        assert_eq!(task_label(TaskId::Mul, 1, 2, 97).unwrap(), 2);
        assert_eq!(task_label(TaskId::Quad, 1, 2, 97).unwrap(), 5);
        assert_eq!(task_label(TaskId::Quad, 10, 4, 97).unwrap(), 19);
        assert_eq!(task_label(TaskId::Add, 96, 1, 97).unwrap(), 0);
        assert_eq!(task_label(TaskId::Mul, 5, 20, 97).unwrap(), 3);
        assert_eq!(task_label(TaskId::Quad, 0, 0, 97).unwrap(), 0);
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(task_label(TaskId::Add, 97, 0, 97).is_err());
        assert!(task_label(TaskId::Add, 0, 200, 97).is_err());
        assert!(generate(1, 0).is_err());
    }

    #[test]
    fn same_seed_same_split() {
        let (a_train, a_test) = generate(97, 42).unwrap();
        let (b_train, b_test) = generate(97, 42).unwrap();
        assert_eq!(a_train.pairs, b_train.pairs);
        assert_eq!(a_test.pairs, b_test.pairs);
    }

    #[test]
    fn different_seed_different_split() {
        let (a, _) = generate(97, 42).unwrap();
        let (b, _) = generate(97, 43).unwrap();
        assert_ne!(a.pairs, b.pairs);
    }

    #[test]
    fn csv_dump_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let (train, test) = generate(5, 1).unwrap();
        write_csv(&train, &test, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "x,y,add,mul,quad,split");
        assert_eq!(lines.len(), 1 + 25);
        assert!(lines[1].ends_with(",train"));
        assert!(lines[lines.len() - 1].ends_with(",test"));
    }
}
