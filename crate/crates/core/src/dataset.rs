//! Channel datasets and their on-disk format.
//!
//! A dataset file is JSON:
//!
//! ```text
//! {
//!   "format": "beamadapt-dataset",
//!   "version": 1,
//!   "nt": 4, "k": 4,
//!   "family": "rayleigh,ricean,nakagami",
//!   "seed": 7,
//!   "normalization": "max_column_norm",
//!   "dropped": 0,
//!   "samples": [
//!     { "group": 0, "scale": 1.2e-5,
//!       "re": [...], "im": [...],      // Nt*K entries, user-major: h_1 then h_2 ...
//!       "label": [q_1, ..., q_K] }      // or null
//!   ]
//! }
//! ```
//!
//! Channels are stored unnormalised; `scale` is the largest column norm and
//! divides the channel before it is fed to the embedding network.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{rng_for, sample_channel, FadingSpec, LargeScaleSpec};
use crate::error::{Error, Result};
use crate::linalg::{CMat, C64};
use crate::system::SystemConfig;

pub const DATASET_FORMAT: &str = "beamadapt-dataset";
pub const DATASET_VERSION: u32 = 1;
pub const NORMALIZATION: &str = "max_column_norm";

/// Largest tolerated fraction of samples a labeler may fail on.
pub const MAX_DROP_RATE: f64 = 0.01;

/// One channel with an optional uplink power label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub channel: CMat,
    /// Index of the generating family (or task) within the dataset.
    pub group: u32,
    pub label: Option<Vec<f64>>,
}

impl Sample {
    pub fn new(channel: CMat, group: u32) -> Self {
        Self {
            channel,
            group,
            label: None,
        }
    }

    pub fn labeled(channel: CMat, label: Vec<f64>) -> Self {
        Self {
            channel,
            group: 0,
            label: Some(label),
        }
    }

    /// Input normalisation factor: the largest column norm.
    pub fn scale(&self) -> f64 {
        channel_scale(&self.channel)
    }
}

pub fn channel_scale(h: &CMat) -> f64 {
    (0..h.cols())
        .map(|k| h.column(k).norm())
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub nt: usize,
    pub k: usize,
    pub family: String,
    pub seed: u64,
    /// Samples dropped because labelling failed.
    pub dropped: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(nt: usize, k: usize, family: impl Into<String>, seed: u64) -> Self {
        Self {
            nt,
            k,
            family: family.into(),
            seed,
            dropped: 0,
            samples: Vec::new(),
        }
    }

    pub fn from_samples(nt: usize, k: usize, samples: Vec<Sample>) -> Self {
        Self {
            samples,
            ..Self::new(nt, k, "custom", 0)
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.label.is_some())
    }

    pub fn channels(&self) -> Vec<CMat> {
        self.samples.iter().map(|s| s.channel.clone()).collect()
    }

    /// Subset by indices, keeping metadata.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Self {
        Self {
            nt: self.nt,
            k: self.k,
            family: self.family.clone(),
            seed: self.seed,
            dropped: self.dropped,
            samples: Vec::new(),
        }
    }

    /// Splits off the last `fraction` of samples (in stored order).
    pub fn split_tail(&self, fraction: f64) -> (Self, Self) {
        let n_tail = ((self.len() as f64) * fraction).round() as usize;
        let n_head = self.len() - n_tail.min(self.len());
        let head: Vec<usize> = (0..n_head).collect();
        let tail: Vec<usize> = (n_head..self.len()).collect();
        (self.select(&head), self.select(&tail))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = DatasetFile::from(self);
        fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let file: DatasetFile = serde_json::from_str(&text)?;
        file.try_into()
    }
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    group: u32,
    scale: f64,
    re: Vec<f64>,
    im: Vec<f64>,
    label: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    format: String,
    version: u32,
    nt: usize,
    k: usize,
    family: String,
    seed: u64,
    normalization: String,
    dropped: usize,
    samples: Vec<SampleRecord>,
}

impl From<&Dataset> for DatasetFile {
    fn from(ds: &Dataset) -> Self {
        let samples = ds
            .samples
            .iter()
            .map(|s| {
                let h = &s.channel;
                let mut re = Vec::with_capacity(h.rows() * h.cols());
                let mut im = Vec::with_capacity(h.rows() * h.cols());
                for k in 0..h.cols() {
                    for n in 0..h.rows() {
                        re.push(h[(n, k)].re);
                        im.push(h[(n, k)].im);
                    }
                }
                SampleRecord {
                    group: s.group,
                    scale: s.scale(),
                    re,
                    im,
                    label: s.label.clone(),
                }
            })
            .collect();
        Self {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            nt: ds.nt,
            k: ds.k,
            family: ds.family.clone(),
            seed: ds.seed,
            normalization: NORMALIZATION.into(),
            dropped: ds.dropped,
            samples,
        }
    }
}

impl TryFrom<DatasetFile> for Dataset {
    type Error = Error;

    fn try_from(f: DatasetFile) -> Result<Self> {
        if f.format != DATASET_FORMAT {
            return Err(Error::Format(format!("not a dataset file: {}", f.format)));
        }
        if f.version != DATASET_VERSION {
            return Err(Error::Version {
                found: f.version,
                expected: DATASET_VERSION,
            });
        }
        if f.normalization != NORMALIZATION {
            return Err(Error::Format(format!("unknown normalization {}", f.normalization)));
        }
        let n = f.nt * f.k;
        let samples = f
            .samples
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                if r.re.len() != n || r.im.len() != n {
                    return Err(Error::Format(format!("sample {i} has the wrong entry count")));
                }
                if r.label.as_ref().is_some_and(|l| l.len() != f.k) {
                    return Err(Error::Format(format!("sample {i} label has the wrong length")));
                }
                let channel = CMat::from_fn(f.nt, f.k, |row, col| {
                    C64::new(r.re[col * f.nt + row], r.im[col * f.nt + row])
                });
                Ok(Sample {
                    channel,
                    group: r.group,
                    label: r.label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            nt: f.nt,
            k: f.k,
            family: f.family,
            seed: f.seed,
            dropped: f.dropped,
            samples,
        })
    }
}

/// Labels channels in parallel, dropping failures. Errors when more than
/// [`MAX_DROP_RATE`] of the samples fail.
pub fn label_samples<F>(samples: Vec<Sample>, labeler: &F) -> Result<(Vec<Sample>, usize)>
where
    F: Fn(&CMat) -> Result<Vec<f64>> + Sync,
{
    let total = samples.len();
    let labeled: Vec<Option<Sample>> = samples
        .into_par_iter()
        .map(|mut s| match labeler(&s.channel) {
            Ok(q) => {
                s.label = Some(q);
                Some(s)
            }
            Err(_) => None,
        })
        .collect();
    let kept: Vec<Sample> = labeled.into_iter().flatten().collect();
    let dropped = total - kept.len();
    if dropped as f64 > MAX_DROP_RATE * total as f64 {
        return Err(Error::LabelDropRate { dropped, total });
    }
    Ok((kept, dropped))
}

/// Merged dataset over fading families, `n_per_family` channels each, with
/// optional labels.
pub fn build_pretrain_dataset<F>(
    cfg: &SystemConfig,
    families: &[FadingSpec],
    n_per_family: usize,
    large: &LargeScaleSpec,
    labeler: Option<&F>,
    seed: u64,
) -> Result<Dataset>
where
    F: Fn(&CMat) -> Result<Vec<f64>> + Sync,
{
    if n_per_family == 0 {
        return Err(Error::Empty("n_per_family"));
    }
    if families.is_empty() {
        return Err(Error::Empty("fading families"));
    }
    for f in families {
        f.validate()?;
    }
    large.validate()?;
    let mut samples = Vec::with_capacity(families.len() * n_per_family);
    for (g, fam) in families.iter().enumerate() {
        samples.extend((0..n_per_family).into_par_iter().map(|i| {
            let mut rng = rng_for(seed, g as u64, i as u64);
            Sample::new(sample_channel(cfg, fam, large, &mut rng), g as u32)
        }).collect::<Vec<_>>());
    }
    let family = families
        .iter()
        .map(|f| f.family.name())
        .collect::<Vec<_>>()
        .join(",");
    let mut ds = Dataset::new(cfg.nt, cfg.k_users, family, seed);
    match labeler {
        Some(l) => {
            let (kept, dropped) = label_samples(samples, l)?;
            ds.samples = kept;
            ds.dropped = dropped;
        }
        None => ds.samples = samples,
    }
    Ok(ds)
}

/// Unlabeled channels from one scenario.
pub fn draw_channels(
    cfg: &SystemConfig,
    fading: &FadingSpec,
    large: &LargeScaleSpec,
    n: usize,
    seed: u64,
    stream: u64,
) -> Vec<CMat> {
    (0..n)
        .into_par_iter()
        .map(|i| sample_channel(cfg, fading, large, &mut rng_for(seed, stream, i as u64)))
        .collect()
}
