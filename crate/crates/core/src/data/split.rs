use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::windows::TraceSample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Shuffle individual windows (overlapping windows may straddle splits).
    #[default]
    Sample,
    /// Keep every window of a `(video, user)` stream in the same split.
    Stream,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
    pub mode: SplitMode,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_frac: 0.8,
            val_frac: 0.1,
            test_frac: 0.1,
            seed: 0,
            mode: SplitMode::Sample,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("split.train_frac", self.train_frac),
            ("split.val_frac", self.val_frac),
            ("split.test_frac", self.test_frac),
        ] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::config(name, "must be in (0, 1]"));
            }
        }
        let sum = self.train_frac + self.val_frac + self.test_frac;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config("split.train_frac", format!("fractions sum to {sum}, not 1")));
        }
        Ok(())
    }

    fn fracs(&self) -> [f64; 3] {
        [self.train_frac, self.val_frac, self.test_frac]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config("split", format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct DatasetSplit {
    pub train: Vec<TraceSample>,
    pub val: Vec<TraceSample>,
    pub test: Vec<TraceSample>,
}

impl DatasetSplit {
    pub fn get(&self, split: Split) -> &[TraceSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Largest-remainder apportionment of `n` items over `fracs`. Leftover units
/// go to the largest fractional remainders; equal remainders favour the
/// earlier split (train, then val, then test).
pub fn split_sizes(n: usize, fracs: [f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = fracs.iter().map(|f| f * n as f64).collect();
    let mut sizes = [0usize; 3];
    for (size, q) in sizes.iter_mut().zip(&quotas) {
        *size = q.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let assigned: usize = sizes.iter().sum();
    for &i in order.iter().take(n - assigned) {
        sizes[i] += 1;
    }
    sizes
}

/// Deterministic partition into train/val/test. Samples are put into
/// canonical `(video, user, start)` order before shuffling, so the result
/// depends only on the sample set and the seed.
pub fn split_dataset(samples: &[TraceSample], spec: &SplitSpec) -> Result<DatasetSplit> {
    spec.validate()?;
    let mut sorted: Vec<&TraceSample> = samples.iter().collect();
    sorted.sort_by(|a, b| a.key().cmp(&b.key()));
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut out = DatasetSplit::default();
    match spec.mode {
        SplitMode::Sample => {
            sorted.shuffle(&mut rng);
            let [n_train, n_val, _] = split_sizes(sorted.len(), spec.fracs());
            for (i, s) in sorted.into_iter().enumerate() {
                let bucket = if i < n_train {
                    &mut out.train
                } else if i < n_train + n_val {
                    &mut out.val
                } else {
                    &mut out.test
                };
                bucket.push(s.clone());
            }
        }
        SplitMode::Stream => {
            let mut streams: BTreeMap<(&str, &str), Vec<&TraceSample>> = BTreeMap::new();
            for s in sorted {
                streams.entry((&s.video_id, &s.user_id)).or_default().push(s);
            }
            let mut streams: Vec<Vec<&TraceSample>> = streams.into_values().collect();
            streams.shuffle(&mut rng);
            let [n_train, n_val, _] = split_sizes(streams.len(), spec.fracs());
            for (i, stream) in streams.into_iter().enumerate() {
                let bucket = if i < n_train {
                    &mut out.train
                } else if i < n_train + n_val {
                    &mut out.val
                } else {
                    &mut out.test
                };
                bucket.extend(stream.into_iter().cloned());
            }
        }
    }
    Ok(out)
}
