//! Mix-then-split of scenario files into train/validation/test manifests.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Sample `index` of file `file` in a manifest's file list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SampleRef {
    pub file: u32,
    pub index: u32,
}

/// Disjoint train/validation/test index sets over a list of dataset files.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitManifest {
    pub seed: u64,
    pub files: Vec<String>,
    pub train: Vec<SampleRef>,
    pub val: Vec<SampleRef>,
    pub test: Vec<SampleRef>,
}

/// Pools every sample of every file, shuffles with `seed`, and cuts 8:1:1.
///
/// Train gets `⌊0.8·N⌋`, validation `⌊0.1·N⌋`, test the remainder.
pub fn split_dataset(files: &[String], counts: &[usize], seed: u64) -> Result<SplitManifest> {
    if files.len() != counts.len() {
        return Err(Error::Contract("one sample count per file required".into()));
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Contract("cannot split an empty dataset".into()));
    }
    let mut all: Vec<SampleRef> = counts
        .iter()
        .enumerate()
        .flat_map(|(f, &n)| {
            (0..n).map(move |i| SampleRef {
                file: f as u32,
                index: i as u32,
            })
        })
        .collect();
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = total * 8 / 10;
    let n_val = total / 10;
    let test = all.split_off(n_train + n_val);
    let val = all.split_off(n_train);
    Ok(SplitManifest {
        seed,
        files: files.to_vec(),
        train: all,
        val,
        test,
    })
}

impl SplitManifest {
    pub fn total(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    /// Plain-text form: one header line, `seed`, `file` lines, then one
    /// `train|val|test <file> <index>` line per sample.
    pub fn to_text(&self) -> String {
        let mut s = String::from("csi-split-manifest 1\n");
        let _ = writeln!(s, "seed {}", self.seed);
        for (i, f) in self.files.iter().enumerate() {
            let _ = writeln!(s, "file {i} {f}");
        }
        for (tag, refs) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for r in refs {
                let _ = writeln!(s, "{tag} {} {}", r.file, r.index);
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Format(format!("manifest line {}: {msg}", line + 1));
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "csi-split-manifest 1")) => {}
            _ => return Err(Error::Format("missing manifest header".into())),
        }
        let mut m = SplitManifest {
            seed: 0,
            files: Vec::new(),
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for (no, line) in lines {
            let mut parts = line.splitn(3, ' ');
            let tag = parts.next().unwrap_or_default();
            let a = parts.next().ok_or_else(|| bad(no, "missing field"))?;
            let b = parts.next();
            match tag {
                "seed" => m.seed = a.parse().map_err(|_| bad(no, "bad seed"))?,
                "file" => {
                    let idx: usize = a.parse().map_err(|_| bad(no, "bad file index"))?;
                    if idx != m.files.len() {
                        return Err(bad(no, "file indices must be consecutive"));
                    }
                    m.files.push(b.ok_or_else(|| bad(no, "missing path"))?.to_string());
                }
                "train" | "val" | "test" => {
                    let file: u32 = a.parse().map_err(|_| bad(no, "bad file index"))?;
                    let index: u32 = b
                        .ok_or_else(|| bad(no, "missing sample index"))?
                        .parse()
                        .map_err(|_| bad(no, "bad sample index"))?;
                    if file as usize >= m.files.len() {
                        return Err(bad(no, "reference to undeclared file"));
                    }
                    let r = SampleRef { file, index };
                    match tag {
                        "train" => m.train.push(r),
                        "val" => m.val.push(r),
                        _ => m.test.push(r),
                    }
                }
                _ => return Err(bad(no, "unknown record")),
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}.csid")).collect()
    }

    #[test]
    fn ten_thousand_splits_8000_1000_1000() {
        let m = split_dataset(&names(1), &[10_000], 1).unwrap();
        assert_eq!((m.train.len(), m.val.len(), m.test.len()), (8000, 1000, 1000));
    }

    #[test]
    fn empty_input_rejected() {
        assert!(split_dataset(&[], &[], 1).is_err());
        assert!(split_dataset(&names(2), &[0, 0], 1).is_err());
    }

    #[test]
    fn deterministic_and_text_round_trip() {
        let a = split_dataset(&names(3), &[10, 7, 13], 99).unwrap();
        let b = split_dataset(&names(3), &[10, 7, 13], 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(SplitManifest::from_text(&a.to_text()).unwrap(), a);
        assert_ne!(a, split_dataset(&names(3), &[10, 7, 13], 100).unwrap());
    }

    proptest! {
        #[test]
        fn partition_covers_every_sample_once(counts in prop::collection::vec(0usize..40, 1..5), seed: u64) {
            prop_assume!(counts.iter().sum::<usize>() > 0);
            let m = split_dataset(&names(counts.len()), &counts, seed).unwrap();
            let mut seen = BTreeSet::new();
            for r in m.train.iter().chain(&m.val).chain(&m.test) {
                prop_assert!(seen.insert(*r));
                prop_assert!((r.index as usize) < counts[r.file as usize]);
            }
            prop_assert_eq!(seen.len(), counts.iter().sum::<usize>());
        }
    }
}
