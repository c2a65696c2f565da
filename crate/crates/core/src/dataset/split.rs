use rand::seq::SliceRandom;

use super::manifest::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::rng;

/// How many records go to each split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitSizing {
    /// Fractions summing to 1; train and val take `floor(N·r)`, test the remainder.
    Ratios { train: f64, val: f64, test: f64 },
    /// Exact sizes; must sum to the number of records being assigned.
    Counts { train: usize, val: usize, test: usize },
}

impl SplitSizing {
    pub fn sizes(&self, n: usize) -> Result<[usize; 3]> {
        match *self {
            SplitSizing::Ratios { train, val, test } => {
                let all = [train, val, test];
                if all.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
                    return Err(Error::invalid("split_dataset", format!("ratios must be positive, got {all:?}")));
                }
                if (train + val + test - 1.0).abs() > 1e-9 {
                    return Err(Error::invalid("split_dataset", format!("ratios sum to {}, not 1", train + val + test)));
                }
                let n_train = (n as f64 * train).floor() as usize;
                let n_val = ((n as f64 * val).floor() as usize).min(n - n_train);
                Ok([n_train, n_val, n - n_train - n_val])
            }
            SplitSizing::Counts { train, val, test } => {
                if train + val + test != n {
                    return Err(Error::invalid(
                        "split_dataset",
                        format!("counts {train}+{val}+{test} do not sum to {n} records"),
                    ));
                }
                Ok([train, val, test])
            }
        }
    }
}

/// Assigns splits by a seeded shuffle. With `preserve`, records that already
/// carry a split keep it and only the rest are shuffled and sized.
pub fn split_dataset(manifest: &DatasetManifest, sizing: SplitSizing, seed: u64, preserve: bool) -> Result<DatasetManifest> {
    let mut out = manifest.clone();
    let mut pending: Vec<usize> = (0..out.len())
        .filter(|&i| !preserve || out.records()[i].split.is_none())
        .collect();
    let [n_train, n_val, _] = sizing.sizes(pending.len())?;
    pending.shuffle(&mut rng::seeded(seed));
    let records = out.records_mut();
    for (pos, &i) in pending.iter().enumerate() {
        records[i].split = Some(if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        });
    }
    Ok(out)
}

pub fn split_sizes(manifest: &DatasetManifest) -> [usize; 3] {
    [Split::Train, Split::Val, Split::Test].map(|s| manifest.in_split(s).count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::image::Modality;
    use crate::dataset::manifest::CaseRecord;

    fn manifest(n: usize) -> DatasetManifest {
        let records = (0..n)
            .map(|i| CaseRecord {
                id: format!("r{i:04}"),
                image_path: format!("r{i}.pgm"),
                modality: Modality::Fa,
                disease: format!("d{}", i % 3),
                keywords: vec![],
                description: "x".into(),
                split: None,
            })
            .collect();
        DatasetManifest::new(records).unwrap()
    }

    const SIXTY: SplitSizing = SplitSizing::Ratios { train: 0.6, val: 0.2, test: 0.2 };

    #[test]
    fn floor_rule_sizes() {
        assert_eq!(SIXTY.sizes(10).unwrap(), [6, 2, 2]);
        assert_eq!(SIXTY.sizes(15709).unwrap(), [9425, 3141, 3143]);
    }

    #[test]
    fn invalid_ratios() {
        assert!(SplitSizing::Ratios { train: 0.6, val: 0.2, test: 0.3 }.sizes(10).is_err());
        assert!(SplitSizing::Ratios { train: 1.0, val: 0.0, test: 0.0 }.sizes(10).is_err());
        assert!(SplitSizing::Counts { train: 1, val: 1, test: 1 }.sizes(4).is_err());
    }

    #[test]
    fn deterministic_partition() {
        let m = manifest(10);
        let a = split_dataset(&m, SIXTY, 7, false).unwrap();
        let b = split_dataset(&m, SIXTY, 7, false).unwrap();
        assert_eq!(a, b);
        assert_eq!(split_sizes(&a), [6, 2, 2]);
        assert!(a.records().iter().all(|r| r.split.is_some()));
    }

    #[test]
    fn preserve_keeps_existing() {
        let m = manifest(12);
        let mut first = split_dataset(&m, SplitSizing::Counts { train: 12, val: 0, test: 0 }, 1, false).unwrap();
        for r in first.records_mut().iter_mut().skip(2) {
            r.split = None;
        }
        let out = split_dataset(&first, SplitSizing::Counts { train: 6, val: 2, test: 2 }, 3, true).unwrap();
        assert_eq!(out.records()[0].split, Some(Split::Train));
        assert_eq!(out.records()[1].split, Some(Split::Train));
        assert_eq!(split_sizes(&out), [8, 2, 2]);
    }
}
