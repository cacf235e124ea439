//! Dataset manifest: rows of (speech wav, noise wav, SNR, split) stored as
//! CSV, plus the deterministic split assignment used by `prepare`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum ManifestError {
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("row {0}: unknown split {1:?}")]
    UnknownSplit(usize, String),
    #[error("need {needed} speech utterances for the requested splits, found {found}")]
    NotEnoughUtterances { needed: usize, found: usize },
    #[error("no noise files given")]
    NoNoiseFiles,
    #[error("no SNR levels given")]
    NoSnrLevels,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl FromStr for Split {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub speech: PathBuf,
    pub noise: PathBuf,
    pub snr_db: f64,
    pub split: Split,
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> Vec<&ManifestRow> {
        self.rows.iter().filter(|r| r.split == split).collect()
    }

    pub fn read(path: &Path) -> Result<Self, ManifestError> {
        let mut reader = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        for (i, record) in reader.deserialize::<(String, String, f64, String)>().enumerate() {
            let (speech, noise, snr_db, split) = record?;
            let split = split
                .parse()
                .map_err(|_| ManifestError::UnknownSplit(i, split.clone()))?;
            rows.push(ManifestRow {
                speech: PathBuf::from(speech),
                noise: PathBuf::from(noise),
                snr_db,
                split,
            });
        }
        Ok(Self { rows })
    }

    pub fn write(&self, path: &Path) -> Result<(), ManifestError> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(["speech", "noise", "snr_db", "split"])?;
        for row in &self.rows {
            writer.write_record([
                row.speech.display().to_string(),
                row.noise.display().to_string(),
                row.snr_db.to_string(),
                row.split.to_string(),
            ])?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Requested split sizes, in utterances.
#[derive(Debug, Clone, Copy)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// Deterministically shuffle the speech files and assign each to a split,
/// pairing it with a noise file (round-robin over a shuffled noise order)
/// and an SNR level.
pub fn assign_splits(
    speech_files: &[PathBuf],
    noise_files: &[PathBuf],
    snr_levels: &[f64],
    sizes: SplitSizes,
    seed: u64,
) -> Result<Manifest, ManifestError> {
    if noise_files.is_empty() {
        return Err(ManifestError::NoNoiseFiles);
    }
    if snr_levels.is_empty() {
        return Err(ManifestError::NoSnrLevels);
    }
    if speech_files.len() < sizes.total() {
        return Err(ManifestError::NotEnoughUtterances {
            needed: sizes.total(),
            found: speech_files.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut speech: Vec<PathBuf> = speech_files.to_vec();
    speech.sort();
    speech.shuffle(&mut rng);
    let mut noise: Vec<PathBuf> = noise_files.to_vec();
    noise.sort();
    noise.shuffle(&mut rng);

    let mut rows = Vec::with_capacity(sizes.total());
    for (i, path) in speech.into_iter().take(sizes.total()).enumerate() {
        let split = if i < sizes.train {
            Split::Train
        } else if i < sizes.train + sizes.val {
            Split::Val
        } else {
            Split::Test
        };
        rows.push(ManifestRow {
            speech: path,
            noise: noise[i % noise.len()].clone(),
            snr_db: snr_levels[i % snr_levels.len()],
            split,
        });
    }
    Ok(Manifest { rows })
}
