//! On-disk dataset layout shared by the commands: `<root>/<split>/pair_NNN/`
//! directories, each holding the pair's images, label maps, and the
//! generating truth field.

use std::path::{Path, PathBuf};

use divreg_core::error::{CoreError, Result};
use divreg_core::image::{load_image, Image};
use divreg_core::train::PairSource;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

pub const MOVING: &str = "moving.mha";
pub const FIXED: &str = "fixed.mha";
pub const MOVING_LABELS: &str = "moving_labels.mha";
pub const FIXED_LABELS: &str = "fixed_labels.mha";
pub const TRUTH_FIELD: &str = "truth_field.mha";

/// Partition `count` pairs by the given ratios. Whole-number shares are
/// assigned first; the remainder goes to the earliest splits, so the sizes
/// always sum to `count`.
pub fn split_sizes(count: usize, ratios: [usize; 3]) -> Result<[usize; 3]> {
    let total: usize = ratios.iter().sum();
    if total == 0 {
        return Err(CoreError::InvalidArgument(
            "split ratios must not all be zero".into(),
        ));
    }
    let mut sizes = [0usize; 3];
    for (s, r) in sizes.iter_mut().zip(ratios) {
        *s = count * r / total;
    }
    let mut rest = count - sizes.iter().sum::<usize>();
    for s in sizes.iter_mut() {
        if rest == 0 {
            break;
        }
        *s += 1;
        rest -= 1;
    }
    Ok(sizes)
}

/// Sorted pair directories of one split.
pub fn list_pairs(root: &Path, split: &str) -> Result<Vec<PathBuf>> {
    let dir = root.join(split);
    let mut pairs = Vec::new();
    let entries = std::fs::read_dir(&dir).map_err(|e| CoreError::Parse {
        path: dir.display().to_string(),
        msg: format!("not a readable split directory: {e}"),
    })?;
    for entry in entries {
        let entry = entry.map_err(CoreError::Io)?;
        if entry.path().is_dir() {
            pairs.push(entry.path());
        }
    }
    pairs.sort();
    if pairs.is_empty() {
        return Err(CoreError::InvalidArgument(format!(
            "no pair directories under {}",
            dir.display()
        )));
    }
    Ok(pairs)
}

/// Training stream over a stored split: each epoch visits every pair once
/// in a seed-determined order. The stream position is a pure function of
/// the draw counter, so skipping ahead reproduces an uninterrupted run.
pub struct DirectorySource {
    dims: Vec<usize>,
    spacing: Vec<f64>,
    pairs: Vec<PathBuf>,
    seed: u64,
    drawn: u64,
    cached_epoch: Option<(u64, Vec<usize>)>,
}

impl DirectorySource {
    pub fn open(root: &Path, split: &str, seed: u64) -> Result<Self> {
        let pairs = list_pairs(root, split)?;
        let probe = load_image(&pairs[0].join(MOVING))?;
        Ok(Self {
            dims: probe.dims,
            spacing: probe.spacing,
            pairs,
            seed,
            drawn: 0,
            cached_epoch: None,
        })
    }

    fn order_for(&mut self, epoch: u64) -> &[usize] {
        let stale = !matches!(&self.cached_epoch, Some((e, _)) if *e == epoch);
        if stale {
            let mut order: Vec<usize> = (0..self.pairs.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(
                self.seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15),
            );
            order.shuffle(&mut rng);
            self.cached_epoch = Some((epoch, order));
        }
        &self.cached_epoch.as_ref().unwrap().1
    }
}

impl PairSource for DirectorySource {
    fn dims(&self) -> &[usize] {
        &self.dims
    }

    fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    fn next_pair(&mut self) -> Result<(Image, Image)> {
        let n = self.pairs.len() as u64;
        let (epoch, pos) = (self.drawn / n, (self.drawn % n) as usize);
        let idx = self.order_for(epoch)[pos];
        let dir = self.pairs[idx].clone();
        let moving = load_image(&dir.join(MOVING))?;
        let fixed = load_image(&dir.join(FIXED))?;
        self.drawn += 1;
        Ok((moving, fixed))
    }

    fn skip(&mut self, n: u64) -> Result<()> {
        self.drawn += n;
        Ok(())
    }
}
