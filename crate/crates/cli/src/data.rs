use std::path::{Path, PathBuf};

use clap::ValueEnum;
use slifnet::data::{crop_augment, load_cifar10, load_mnist, synthetic, CropMode, Dataset, Split};
use slifnet::rng::substream;
use slifnet::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    /// Built-in 8x8 shape set (500 train / 200 test), needs no files.
    Synthetic,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Synthetic => "synthetic",
        }
    }
}

pub fn default_data_dir(kind: DatasetKind) -> PathBuf {
    Path::new("data").join(kind.name())
}

/// Picks the first of `names` that exists under `dir`, so directories may
/// hold either raw or gzipped files.
fn existing(dir: &Path, names: &[String]) -> Result<PathBuf> {
    for n in names {
        let p = dir.join(n);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Dataset {
        path: dir.join(&names[0]).display().to_string(),
        detail: format!("not found (also tried: {})", names[1..].join(", ")),
    })
}

/// Loads a dataset split ready for the network: pixels in [0,1], CIFAR-10
/// already cropped to 24x24 (random patches for training, center patches
/// for testing). The crop draw is fixed so the dataset is a function of the
/// files alone.
pub fn load(kind: DatasetKind, data_dir: &Path, split: Split) -> Result<Dataset> {
    match kind {
        DatasetKind::Mnist => {
            let (img, lab) = match split {
                Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
                Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
            };
            let img = existing(data_dir, &[img.to_string(), format!("{img}.gz")])?;
            let lab = existing(data_dir, &[lab.to_string(), format!("{lab}.gz")])?;
            load_mnist(img, lab, split)
        }
        DatasetKind::Cifar10 => {
            let names: Vec<String> = match split {
                Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
                Split::Test => vec!["test_batch.bin".to_string()],
            };
            let mut paths = Vec::with_capacity(names.len());
            for n in &names {
                paths.push(existing(data_dir, std::slice::from_ref(n))?);
            }
            let d = load_cifar10(&paths, split)?;
            let mode = match split {
                Split::Train => CropMode::Random,
                Split::Test => CropMode::Center,
            };
            crop_augment(&d, 24, 24, &mut substream(0, "crop", 0), mode)
        }
        DatasetKind::Synthetic => Ok(match split {
            Split::Train => synthetic(500, 1, split),
            Split::Test => synthetic(200, 2, split),
        }),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}
