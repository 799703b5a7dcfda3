//! One permutation + one sign random projection (OP+OSRP).
//!
//! The `p` input columns are permuted once, split evenly into `k` bins, and
//! every bin is reduced to the sign of a ±1 random projection of its nonzero
//! entries. Each sign is expanded to two binary slots, so a `p`-dimensional
//! binary vector maps to a `2k`-dimensional binary vector:
//!
//! | projection | slot `2b` | slot `2b + 1` |
//! |------------|-----------|---------------|
//! | `z > 0`    | 0         | 1             |
//! | `z < 0`    | 1         | 0             |
//! | `z = 0`    | 0         | 0             |
//!
//! The permutation is never materialized: it is a keyed invertible mixing
//! function over the next power of two above `p`, restricted to `[0, p)` by
//! cycle walking.

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{Batch, Example, ParamKey};

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum OsrpError {
    #[error("feature {key} is outside the input dimension {p}")]
    FeatureOutOfRange { key: u64, p: u64 },
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Permutation {
    Identity,
    Keyed { bits: u32, mults: [u64; 2], offset: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Signs {
    Keyed { seed: u64 },
    /// Explicit sign per column, `true` meaning `+1`.
    Table(Vec<bool>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OsrpPlan {
    p: u64,
    k: u64,
    seed: u64,
    permutation: Permutation,
    signs: Signs,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl OsrpPlan {
    /// Plan with a seeded permutation and seeded signs.
    pub fn new(p: u64, k: u64, seed: u64) -> Result<Self, OsrpError> {
        Self::check_dims(p, k)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bits = 64 - (p - 1).leading_zeros();
        let permutation = Permutation::Keyed {
            bits,
            mults: [rng.next_u64() | 1, rng.next_u64() | 1],
            offset: rng.next_u64(),
        };
        let signs = Signs::Keyed { seed: rng.next_u64() };
        Ok(OsrpPlan { p, k, seed, permutation, signs })
    }

    /// Plan with caller-supplied permutation and signs.
    pub fn with_parts(
        p: u64,
        k: u64,
        permutation: Permutation,
        signs: Signs,
    ) -> Result<Self, OsrpError> {
        Self::check_dims(p, k)?;
        if let Signs::Table(t) = &signs {
            if t.len() as u64 != p {
                return Err(OsrpError::InvalidPlan(format!(
                    "sign table has {} entries for p = {p}",
                    t.len()
                )));
            }
        }
        Ok(OsrpPlan { p, k, seed: 0, permutation, signs })
    }

    fn check_dims(p: u64, k: u64) -> Result<(), OsrpError> {
        if p == 0 || k == 0 || k > p {
            return Err(OsrpError::InvalidPlan(format!("need 1 <= k <= p, got p = {p}, k = {k}")));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> u64 {
        self.p
    }

    pub fn bins(&self) -> u64 {
        self.k
    }

    pub fn output_dim(&self) -> u64 {
        2 * self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn mix(&self, x: u64, bits: u32, mults: &[u64; 2], offset: u64) -> u64 {
        if bits == 0 {
            return 0;
        }
        let mask = if bits == 64 { u64::MAX } else { (1u64 << bits) - 1 };
        let shift = (bits / 2).max(1);
        let mut y = x.wrapping_mul(mults[0]) & mask;
        y ^= y >> shift;
        y = y.wrapping_add(offset) & mask;
        y = y.wrapping_mul(mults[1]) & mask;
        y ^= y >> shift;
        y
    }

    /// Position of column `col` after the permutation.
    pub fn permute(&self, col: u64) -> u64 {
        match &self.permutation {
            Permutation::Identity => col,
            Permutation::Keyed { bits, mults, offset } => {
                let mut y = self.mix(col, *bits, mults, *offset);
                while y >= self.p {
                    y = self.mix(y, *bits, mults, *offset);
                }
                y
            }
        }
    }

    /// Bin of a permuted position; bins differ in size by at most one.
    pub fn bin_of(&self, position: u64) -> u64 {
        (u128::from(position) * u128::from(self.k) / u128::from(self.p)) as u64
    }

    /// Projection sign of an original column.
    pub fn sign(&self, col: u64) -> i64 {
        let positive = match &self.signs {
            Signs::Keyed { seed } => splitmix64(seed ^ splitmix64(col)) >> 63 == 0,
            Signs::Table(t) => t[col as usize],
        };
        if positive {
            1
        } else {
            -1
        }
    }

    pub fn hash_example(&self, features: &[ParamKey]) -> Result<Vec<ParamKey>, OsrpError> {
        let mut z: BTreeMap<u64, i64> = BTreeMap::new();
        for &ParamKey(col) in features {
            if col >= self.p {
                return Err(OsrpError::FeatureOutOfRange { key: col, p: self.p });
            }
            *z.entry(self.bin_of(self.permute(col))).or_insert(0) += self.sign(col);
        }
        Ok(z
            .into_iter()
            .filter(|&(_, v)| v != 0)
            .map(|(b, v)| ParamKey(if v > 0 { 2 * b + 1 } else { 2 * b }))
            .collect())
    }

    /// Re-hash every example. Labels are kept; an example whose bins all
    /// cancel keeps an empty feature list.
    pub fn hash_dataset(&self, batches: &[Batch]) -> Result<Vec<Batch>, OsrpError> {
        batches
            .iter()
            .map(|b| {
                let examples = b
                    .examples
                    .iter()
                    .map(|ex| {
                        Ok(Example {
                            label: ex.label,
                            features: self.hash_example(&ex.features)?,
                        })
                    })
                    .collect::<Result<_, OsrpError>>()?;
                Ok(Batch { batch_id: b.batch_id, examples })
            })
            .collect()
    }
}
