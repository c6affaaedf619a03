//! Byte-level text blocks.
//!
//! A file is cut into consecutive non-overlapping blocks of `d` bytes; the
//! trailing partial block is dropped. Each block goes to the train or held-out
//! split by a hash of its index, so the split does not depend on the seed.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{domain, RaddError, Result};
use crate::rng::{mix64, substream};
use crate::space::{SequenceState, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Heldout => "heldout",
        })
    }
}

impl FromStr for Split {
    type Err = RaddError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "heldout" => Ok(Split::Heldout),
            other => domain(format!(
                "unknown split '{other}' (expected train or heldout)"
            )),
        }
    }
}

/// A byte file viewed as length-`d` blocks.
#[derive(Debug, Clone)]
pub struct Corpus {
    path: PathBuf,
    d: usize,
    bytes: Vec<u8>,
}

impl Corpus {
    pub fn load(path: &Path, d: usize) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(path.to_path_buf(), d, bytes)
    }

    pub fn from_bytes(path: PathBuf, d: usize, bytes: Vec<u8>) -> Result<Self> {
        if d == 0 {
            return Err(RaddError::Shape("block length must be at least 1".into()));
        }
        if bytes.len() < d {
            return Err(RaddError::EmptyCorpus(format!(
                "{} has {} bytes, fewer than d = {d}",
                path.display(),
                bytes.len()
            )));
        }
        Ok(Self { path, d, bytes })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::bytes()
    }

    pub fn n_blocks(&self) -> usize {
        self.bytes.len() / self.d
    }

    /// The file slice behind block `index`.
    pub fn block_bytes(&self, index: usize) -> &[u8] {
        &self.bytes[index * self.d..(index + 1) * self.d]
    }

    pub fn block(&self, index: usize) -> SequenceState {
        SequenceState::new(self.block_bytes(index).iter().map(|&b| b as u32).collect())
    }

    /// Indices of the blocks in `split`, in file order.
    pub fn split_indices(&self, split: Split, heldout_fraction: f64) -> Result<Vec<usize>> {
        if !(0.0..=1.0).contains(&heldout_fraction) {
            return domain(format!(
                "heldout fraction {heldout_fraction} outside [0, 1]"
            ));
        }
        Ok((0..self.n_blocks())
            .filter(|&i| (is_heldout(i, heldout_fraction)) == (split == Split::Heldout))
            .collect())
    }

    pub fn blocks(&self, split: Split, heldout_fraction: f64) -> Result<Vec<SequenceState>> {
        Ok(self
            .split_indices(split, heldout_fraction)?
            .into_iter()
            .map(|i| self.block(i))
            .collect())
    }
}

fn is_heldout(index: usize, fraction: f64) -> bool {
    // Top 53 bits of the hash as a uniform in [0, 1).
    let u = (mix64(index as u64 ^ 0x6a09_e667_f3bc_c909) >> 11) as f64 / (1u64 << 53) as f64;
    u < fraction
}

/// Blocks of one split in file order.
pub fn load_blocks(
    path: &Path,
    d: usize,
    split: Split,
    heldout_fraction: f64,
) -> Result<Vec<SequenceState>> {
    Corpus::load(path, d)?.blocks(split, heldout_fraction)
}

/// Bytes of a block; fails on tokens outside the byte range.
pub fn decode_block(block: &SequenceState) -> Result<Vec<u8>> {
    block
        .tokens()
        .iter()
        .map(|&t| {
            u8::try_from(t).map_err(|_| RaddError::Domain(format!("token {t} is not a byte")))
        })
        .collect()
}

/// A seeded permutation of `items` for epoch `epoch`.
pub fn shuffled<T: Clone>(items: &[T], seed: u64, epoch: u64) -> Vec<T> {
    let mut out = items.to_vec();
    out.shuffle(&mut substream(seed, epoch, 0x5eed));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(len: usize, d: usize) -> Corpus {
        let bytes: Vec<u8> = (0..len).map(|i| (i * 7 % 251) as u8).collect();
        Corpus::from_bytes(PathBuf::from("mem"), d, bytes).unwrap()
    }

    #[test]
    fn floor_division_drops_tail() {
        let c = corpus(1000, 32);
        assert_eq!(c.n_blocks(), 31);
        assert_eq!(c.blocks(Split::Train, 0.0).unwrap().len(), 31);
        assert!(c.blocks(Split::Heldout, 0.0).unwrap().is_empty());
    }

    #[test]
    fn splits_partition_blocks() {
        let c = corpus(64_000, 32);
        let train = c.split_indices(Split::Train, 0.1).unwrap();
        let held = c.split_indices(Split::Heldout, 0.1).unwrap();
        assert_eq!(train.len() + held.len(), c.n_blocks());
        let frac = held.len() as f64 / c.n_blocks() as f64;
        assert!((frac - 0.1).abs() < 0.03, "{frac}");
        assert!(c.split_indices(Split::Train, 1.5).is_err());
    }

    #[test]
    fn blocks_round_trip_to_file_slices() {
        let c = corpus(500, 16);
        for i in 0..c.n_blocks() {
            assert_eq!(decode_block(&c.block(i)).unwrap(), c.block_bytes(i));
        }
    }

    #[test]
    fn short_file_is_empty_corpus() {
        let err = Corpus::from_bytes(PathBuf::from("tiny"), 32, vec![1; 31]).unwrap_err();
        assert!(matches!(err, RaddError::EmptyCorpus(_)));
    }

    #[test]
    fn shuffle_is_seeded() {
        let items: Vec<usize> = (0..100).collect();
        assert_eq!(shuffled(&items, 3, 0), shuffled(&items, 3, 0));
        assert_ne!(shuffled(&items, 3, 0), shuffled(&items, 3, 1));
        assert_ne!(shuffled(&items, 3, 0), items);
    }
}
