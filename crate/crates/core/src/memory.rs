//! FIFO embedding memories and construction of self-organizing prototypes.
//!
//! A [`MemoryBank`] is a fixed-capacity ring of unit-norm embeddings. Each
//! training iteration samples anchors from it and groups every anchor with
//! its nearest neighbours into one prototype ([`SopSet`]).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{
    matmul_nt, normalize_rows_in_place, rowwise_l2_normalize, topk_row, Matrix, NumericsError,
    Scalar,
};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MemoryError {
    #[error("expected rows of dimension {expected}, got {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("cannot sample {requested} anchors from {filled} filled slots")]
    KExceedsFill { requested: usize, filled: usize },
    #[error("{members} members per prototype exceed {filled} filled slots")]
    KTooLargeForBank { members: usize, filled: usize },
    #[error("anchor index {index} outside filled range {filled}")]
    AnchorOutOfRange { index: usize, filled: usize },
    #[error("smoothing must lie in [0, 1), got {0}")]
    InvalidSmoothing(f64),
    #[error("bank state is inconsistent: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Fixed-capacity FIFO ring of unit-norm rows.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank<T> {
    capacity: usize,
    dim: usize,
    storage: Matrix<T>,
    cursor: usize,
    filled: usize,
}

impl<T: Scalar> MemoryBank<T> {
    /// Bank filled with normalized Gaussian rows, usable from the first step.
    pub fn init(capacity: usize, dim: usize, seed: u64) -> Self {
        assert!(
            capacity >= 1 && dim >= 1,
            "bank needs capacity and dim >= 1"
        );
        let mut rng = seed::rng_for(seed, "memory-init", &[]);
        let mut storage = Matrix::from_fn(capacity, dim, |_, _| {
            T::lit(rng.sample::<f64, _>(StandardNormal))
        });
        normalize_rows_in_place(&mut storage).expect("gaussian rows are nonzero");
        Self {
            capacity,
            dim,
            storage,
            cursor: 0,
            filled: capacity,
        }
    }

    /// Rebuilds a bank from saved state.
    pub fn from_parts(
        storage: Matrix<T>,
        cursor: usize,
        filled: usize,
    ) -> Result<Self, MemoryError> {
        let (capacity, dim) = storage.shape();
        if capacity == 0 || cursor >= capacity || filled > capacity {
            return Err(MemoryError::Corrupt(format!(
                "capacity {capacity}, cursor {cursor}, filled {filled}"
            )));
        }
        Ok(Self {
            capacity,
            dim,
            storage,
            cursor,
            filled,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn storage(&self) -> &Matrix<T> {
        &self.storage
    }

    /// Normalizes `rows` and writes them at the cursor, overwriting the
    /// oldest entries first.
    pub fn push(&mut self, rows: &Matrix<T>) -> Result<(), MemoryError> {
        if rows.cols() != self.dim {
            return Err(MemoryError::DimMismatch {
                expected: self.dim,
                found: rows.cols(),
            });
        }
        let rows = rowwise_l2_normalize(rows)?;
        for r in rows.row_iter() {
            self.storage.row_mut(self.cursor).copy_from_slice(r);
            self.cursor = (self.cursor + 1) % self.capacity;
            self.filled = (self.filled + 1).min(self.capacity);
        }
        Ok(())
    }

    /// Valid rows from oldest to newest.
    pub fn ordered(&self) -> Matrix<T> {
        let start = if self.filled == self.capacity {
            self.cursor
        } else {
            0
        };
        let idx: Vec<usize> = (0..self.filled)
            .map(|i| (start + i) % self.capacity)
            .collect();
        self.storage.select_rows(&idx)
    }
}

/// Equivalent free-function form of [`MemoryBank::init`].
pub fn init_bank<T: Scalar>(capacity: usize, dim: usize, seed: u64) -> MemoryBank<T> {
    MemoryBank::init(capacity, dim, seed)
}

/// `count` distinct slots drawn uniformly without replacement.
pub fn sample_anchors<T: Scalar, R: Rng + ?Sized>(
    bank: &MemoryBank<T>,
    count: usize,
    rng: &mut R,
) -> Result<Vec<usize>, MemoryError> {
    if count > bank.filled {
        return Err(MemoryError::KExceedsFill {
            requested: count,
            filled: bank.filled,
        });
    }
    Ok(rand::seq::index::sample(rng, bank.filled, count).into_vec())
}

/// How members distribute their vote across prototypes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "smoothing")]
pub enum ContributionMode {
    /// Full weight on the owning prototype.
    OneHot,
    /// `1 - s` on the owner, `s / (K - 1)` everywhere else.
    Smoothed(f64),
    /// Owner weight `(1 - s) * clamp(cos(member, anchor), 0, 1)`, the rest
    /// spread uniformly.
    SimilaritySoft(f64),
}

impl ContributionMode {
    pub fn validate(&self) -> Result<(), MemoryError> {
        match *self {
            Self::OneHot => Ok(()),
            Self::Smoothed(s) | Self::SimilaritySoft(s) => {
                if (0.0..1.0).contains(&s) {
                    Ok(())
                } else {
                    Err(MemoryError::InvalidSmoothing(s))
                }
            }
        }
    }
}

/// One sampling of self-organizing prototypes.
#[derive(Clone, Debug)]
pub struct SopSet<T> {
    pub num_anchors: usize,
    /// Members per prototype, anchor included (`k + 1`).
    pub members_per_sop: usize,
    /// Member embeddings stacked anchor-major, `K(k+1) × d`.
    pub d: Matrix<T>,
    /// Row-stochastic contributions, `K(k+1) × K`.
    pub y: Matrix<T>,
    pub anchor_indices: Vec<usize>,
    /// Bank slots of the members, `K × (k+1)` row-major; column 0 is the anchor.
    pub member_indices: Vec<usize>,
    /// Cosine similarity of each member to its anchor, `K × (k+1)`.
    pub member_scores: Matrix<T>,
}

impl<T: Scalar> SopSet<T> {
    pub fn members(&self, anchor: usize) -> &[usize] {
        let m = self.members_per_sop;
        &self.member_indices[anchor * m..(anchor + 1) * m]
    }
}

/// Groups each anchor with its `k` nearest bank entries.
///
/// The anchor is always member 0. Remaining members are the `k` most
/// cosine-similar other slots, ties broken by lower slot index.
pub fn build_sop<T: Scalar>(
    bank: &MemoryBank<T>,
    anchor_indices: &[usize],
    k: usize,
    mode: ContributionMode,
) -> Result<SopSet<T>, MemoryError> {
    mode.validate()?;
    let members = k + 1;
    if members > bank.filled {
        return Err(MemoryError::KTooLargeForBank {
            members,
            filled: bank.filled,
        });
    }
    if let Some(&bad) = anchor_indices.iter().find(|&&i| i >= bank.filled) {
        return Err(MemoryError::AnchorOutOfRange {
            index: bad,
            filled: bank.filled,
        });
    }
    let num_anchors = anchor_indices.len();
    let valid = if bank.filled == bank.capacity {
        bank.storage.clone()
    } else {
        bank.storage
            .select_rows(&(0..bank.filled).collect::<Vec<_>>())
    };
    let anchors = bank.storage.select_rows(anchor_indices);
    let mut sims = matmul_nt(&anchors, &valid)?;

    let mut member_indices = Vec::with_capacity(num_anchors * members);
    let mut member_scores = Matrix::zeros(num_anchors, members);
    for (i, &a) in anchor_indices.iter().enumerate() {
        let row = sims.row_mut(i);
        let self_score = row[a];
        row[a] = T::neg_infinity();
        let neighbours = topk_row(row, k);
        member_indices.push(a);
        member_scores.set(i, 0, self_score);
        for (j, &n) in neighbours.iter().enumerate() {
            member_indices.push(n);
            member_scores.set(i, j + 1, row[n]);
        }
    }

    let d = bank.storage.select_rows(&member_indices);
    let y = contribution_matrix(num_anchors, members, &member_scores, mode);
    Ok(SopSet {
        num_anchors,
        members_per_sop: members,
        d,
        y,
        anchor_indices: anchor_indices.to_vec(),
        member_indices,
        member_scores,
    })
}

fn contribution_matrix<T: Scalar>(
    num_anchors: usize,
    members: usize,
    scores: &Matrix<T>,
    mode: ContributionMode,
) -> Matrix<T> {
    let rows = num_anchors * members;
    if num_anchors == 1 {
        return Matrix::filled(rows, 1, T::one());
    }
    let others = T::from_usize(num_anchors - 1).unwrap();
    let mut y = Matrix::zeros(rows, num_anchors);
    for owner in 0..num_anchors {
        for j in 0..members {
            let owner_weight = match mode {
                ContributionMode::OneHot => T::one(),
                ContributionMode::Smoothed(s) => T::one() - T::lit(s),
                ContributionMode::SimilaritySoft(s) => {
                    let keep = T::one() - T::lit(s);
                    if j == 0 {
                        keep
                    } else {
                        keep * scores.get(owner, j).max(T::zero()).min(T::one())
                    }
                }
            };
            let spread = (T::one() - owner_weight) / others;
            let row = y.row_mut(owner * members + j);
            row.fill(spread);
            row[owner] = owner_weight;
        }
    }
    y
}
