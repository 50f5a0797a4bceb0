//! Scenario files on disk and in-memory splits with access accounting.

use std::cell::Cell;
use std::path::{Path, PathBuf};

use super::config::{ExperimentConfig, SampleCount, ScenarioRange};
use crate::channel_sim::{generate_scenario, split_dataset, ChannelMatrix, DatasetFile, ScenarioArea, SplitManifest};
use crate::codec::ProjectionCodec;
use crate::error::{Error, Result};
use crate::tensor_core::Tensor;
use crate::transforms::{channel_to_rows, preprocess, NormStats};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

pub fn data_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("data")
}

pub fn scenario_file_name(id: u32) -> String {
    format!("scenario_{id:03}.csid")
}

pub fn manifest_path(cfg: &ExperimentConfig, range: ScenarioRange) -> PathBuf {
    data_dir(cfg).join(format!("split_{range}.txt"))
}

/// Writes one file per scenario in `range` plus its 8:1:1 split manifest.
pub fn generate_range(cfg: &ExperimentConfig, range: ScenarioRange) -> Result<(Vec<PathBuf>, PathBuf)> {
    let dir = data_dir(cfg);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut paths = Vec::new();
    let mut names = Vec::new();
    for id in range.ids() {
        let area = ScenarioArea::new(id, cfg.seed)?;
        let file = generate_scenario(&area, &cfg.dims, cfg.samples_per_scenario, cfg.seed)?;
        let name = scenario_file_name(id);
        let path = dir.join(&name);
        file.save(&path)?;
        paths.push(path);
        names.push(name);
    }
    let counts = vec![cfg.samples_per_scenario; names.len()];
    let manifest = split_dataset(&names, &counts, cfg.split_seed)?;
    let mpath = manifest_path(cfg, range);
    manifest.save(&mpath)?;
    Ok((paths, mpath))
}

/// Channels of one scenario range, grouped by split.
#[derive(Clone, Debug)]
pub struct RawSplits {
    pub range: ScenarioRange,
    pub manifest: SplitManifest,
    pub train: Vec<ChannelMatrix>,
    pub val: Vec<ChannelMatrix>,
    pub test: Vec<ChannelMatrix>,
}

impl RawSplits {
    /// Loads a generated range, keeping the first `count` training samples
    /// of each scenario in manifest order.
    pub fn load(cfg: &ExperimentConfig, range: ScenarioRange, count: SampleCount) -> Result<Self> {
        let mpath = manifest_path(cfg, range);
        if !mpath.exists() {
            return Err(Error::Contract(format!(
                "missing dataset manifest {} (run generate first)",
                mpath.display()
            )));
        }
        let manifest = SplitManifest::load(&mpath)?;
        let dir = data_dir(cfg);
        let files = manifest
            .files
            .iter()
            .map(|name| load_checked(&dir.join(name), cfg))
            .collect::<Result<Vec<_>>>()?;
        let fetch = |refs: &[crate::channel_sim::SampleRef]| {
            refs.iter()
                .map(|r| {
                    let f = files.get(r.file as usize).ok_or_else(|| {
                        Error::Format(format!("manifest references file {} of {}", r.file, files.len()))
                    })?;
                    f.sample(r.index as usize)
                })
                .collect::<Result<Vec<_>>>()
        };
        let mut kept = vec![0usize; files.len()];
        let train_refs: Vec<_> = manifest
            .train
            .iter()
            .filter(|r| match count {
                SampleCount::Full => true,
                SampleCount::Count(n) => {
                    let k = &mut kept[r.file as usize];
                    *k += 1;
                    *k <= n
                }
            })
            .copied()
            .collect();
        Ok(Self {
            range,
            train: fetch(&train_refs)?,
            val: fetch(&manifest.val)?,
            test: fetch(&manifest.test)?,
            manifest,
        })
    }

    pub fn split(&self, s: Split) -> &[ChannelMatrix] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

fn load_checked(path: &Path, cfg: &ExperimentConfig) -> Result<DatasetFile> {
    if !path.exists() {
        return Err(Error::Contract(format!("missing dataset file {}", path.display())));
    }
    let f = DatasetFile::load(path)?;
    let d = f.dims();
    if (d.n_tx, d.n_sub) != (cfg.dims.n_tx, cfg.dims.n_sub) {
        return Err(Error::Config(format!(
            "{} holds {}x{} channels, config expects {}x{}",
            path.display(),
            d.n_tx,
            d.n_sub,
            cfg.dims.n_tx,
            cfg.dims.n_sub
        )));
    }
    Ok(f)
}

/// One split ready for the model: true channels, coarse estimates, token
/// rows and normalized targets.
#[derive(Clone, Debug)]
pub struct PreparedSplit {
    pub h: Vec<ChannelMatrix>,
    pub h_in: Vec<ChannelMatrix>,
    pub stats: Vec<NormStats>,
    tokens: Vec<f64>,
    targets: Vec<f64>,
    token_shape: [usize; 2],
    target_shape: [usize; 2],
}

impl PreparedSplit {
    pub fn new(h: Vec<ChannelMatrix>, codec: &ProjectionCodec, patch_size: usize) -> Result<Self> {
        let h_in = codec.round_trip_batch(&h)?;
        let (nt, nc) = (codec.dims().n_tx, codec.dims().n_sub);
        let token_shape = [nc / patch_size, 2 * nt * patch_size];
        let target_shape = [2 * nt, nc];
        let mut tokens = Vec::with_capacity(h.len() * nt * nc * 2);
        let mut targets = Vec::with_capacity(h.len() * nt * nc * 2);
        let mut stats = Vec::with_capacity(h.len());
        for (hi, ci) in h.iter().zip(&h_in) {
            let (t, s) = preprocess(ci, patch_size)?;
            tokens.extend(t.flat());
            targets.extend(channel_to_rows(hi).into_iter().map(|v| v / s.scale));
            stats.push(s);
        }
        Ok(Self {
            h,
            h_in,
            stats,
            tokens,
            targets,
            token_shape,
            target_shape,
        })
    }

    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    fn gather(src: &[f64], per: usize, idx: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(per * idx.len());
        for &i in idx {
            out.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        out
    }

    pub(crate) fn batch(&self, idx: &[usize]) -> Result<(Tensor, Tensor)> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Contract(format!("sample {bad} out of range ({})", self.len())));
        }
        let [l, w] = self.token_shape;
        let [r, c] = self.target_shape;
        Ok((
            Tensor::new(&[idx.len(), l, w], Self::gather(&self.tokens, l * w, idx))?,
            Tensor::new(&[idx.len(), r, c], Self::gather(&self.targets, r * c, idx))?,
        ))
    }
}

/// Serves batches from the three splits and counts every sample handed out.
#[derive(Debug)]
pub struct DataLoader {
    splits: [PreparedSplit; 3],
    reads: [Cell<usize>; 3],
}

impl DataLoader {
    pub fn new(raw: &RawSplits, codec: &ProjectionCodec, patch_size: usize) -> Result<Self> {
        let prep = |v: &[ChannelMatrix]| PreparedSplit::new(v.to_vec(), codec, patch_size);
        Ok(Self {
            splits: [prep(&raw.train)?, prep(&raw.val)?, prep(&raw.test)?],
            reads: Default::default(),
        })
    }

    pub fn len(&self, s: Split) -> usize {
        self.splits[s.index()].len()
    }

    /// Tokens `[b, L, w]` and targets `[b, 2Nt, Nc]` for samples `idx`.
    pub fn batch(&self, s: Split, idx: &[usize]) -> Result<(Tensor, Tensor)> {
        let out = self.splits[s.index()].batch(idx)?;
        self.count(s, idx.len());
        Ok(out)
    }

    /// Whole split, for metric evaluation.
    pub fn split(&self, s: Split) -> &PreparedSplit {
        self.count(s, self.splits[s.index()].len());
        &self.splits[s.index()]
    }

    fn count(&self, s: Split, n: usize) {
        let c = &self.reads[s.index()];
        c.set(c.get() + n);
    }

    /// Samples handed out so far, indexed like [`Split::ALL`].
    pub fn reads(&self) -> [usize; 3] {
        [self.reads[0].get(), self.reads[1].get(), self.reads[2].get()]
    }
}
