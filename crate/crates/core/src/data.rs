//! Dataset ingestion: MNIST IDX files, CIFAR-10 binary batches, a bundled
//! synthetic shape set for hermetic tests, and crop augmentation.

use std::fmt;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use ndarray::Array2;
use rand::Rng;

use crate::error::Error;
use crate::network::Shape;
use crate::rng::substream;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// A labelled image set. Images are stored flat, one row per example, in
/// channel-major order (all of channel 0's rows, then channel 1's, ...),
/// with pixel values already scaled into `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Array2<f64>,
    pub shape: Shape,
    pub labels: Vec<u8>,
    pub split: Split,
    pub n_classes: usize,
}

impl Dataset {
    fn checked(self, path: &Path) -> Result<Self> {
        let fail = |detail: String| Error::Dataset { path: path.display().to_string(), detail };
        if self.images.nrows() == 0 {
            return Err(fail("empty dataset".into()));
        }
        if self.images.nrows() != self.labels.len() {
            return Err(fail(format!(
                "{} images but {} labels",
                self.images.nrows(),
                self.labels.len()
            )));
        }
        if self.images.ncols() != self.shape.len() {
            return Err(fail(format!(
                "rows have {} values but shape {:?} needs {}",
                self.images.ncols(),
                self.shape,
                self.shape.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize >= self.n_classes) {
            return Err(fail(format!("label {bad} outside 0..{}", self.n_classes)));
        }
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `n` examples of a seeded shuffle: a reproducible subset
    /// whose membership does not depend on how many examples are taken
    /// elsewhere.
    pub fn sample_subset(&self, n: usize, seed: u64) -> Dataset {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = substream(seed, "subset", 0);
        for i in (1..idx.len()).rev() {
            idx.swap(i, rng.gen_range(0..=i));
        }
        idx.truncate(n.min(idx.len()));
        self.select(&idx)
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        let cols = self.images.ncols();
        let mut images = Array2::zeros((indices.len(), cols));
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            images.row_mut(row).assign(&self.images.row(i));
            labels.push(self.labels[i]);
        }
        Dataset { images, shape: self.shape, labels, ..*self }
    }
}

/// Reads a file, transparently inflating gzip (sniffed from the 1f 8b
/// magic, not the extension).
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(|e| Error::Dataset {
            path: path.display().to_string(),
            detail: format!("gzip decode failed: {e}"),
        })?;
        return Ok(out);
    }
    Ok(raw)
}

struct IdxFile {
    dims: Vec<usize>,
    payload: Vec<u8>,
}

/// Parses an IDX file: big-endian u32 magic (0x08 element type, last byte =
/// dimension count), one big-endian u32 size per dimension, then the raw
/// u8 payload.
fn parse_idx(path: &Path, expect_magic: u32) -> Result<IdxFile> {
    let fail = |detail: String| Error::Dataset { path: path.display().to_string(), detail };
    let bytes = read_maybe_gz(path)?;
    let word = |i: usize| -> Result<u32> {
        let s = bytes
            .get(4 * i..4 * i + 4)
            .ok_or_else(|| fail(format!("truncated header: {} bytes", bytes.len())))?;
        Ok(u32::from_be_bytes(s.try_into().unwrap()))
    };
    let magic = word(0)?;
    if magic != expect_magic {
        return Err(fail(format!("magic {magic:#010x}, expected {expect_magic:#010x}")));
    }
    let n_dims = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(n_dims);
    for d in 0..n_dims {
        dims.push(word(1 + d)? as usize);
    }
    let header = 4 * (1 + n_dims);
    let expected: usize = dims.iter().product();
    let payload = &bytes[header.min(bytes.len())..];
    if payload.len() != expected {
        return Err(fail(format!(
            "payload of {} bytes, dimensions {:?} require {expected}",
            payload.len(),
            dims
        )));
    }
    Ok(IdxFile { dims, payload: payload.to_vec() })
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Loads an MNIST-style pair of IDX files (images magic 0x803 with
/// dimensions n x rows x cols, labels magic 0x801 with dimension n) and
/// scales pixels by 1/255.
pub fn load_mnist(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    split: Split,
) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let images = parse_idx(images_path, IDX_IMAGES_MAGIC)?;
    let labels = parse_idx(labels_path, IDX_LABELS_MAGIC)?;
    let [n, h, w] = images.dims[..] else {
        return Err(Error::Dataset {
            path: images_path.display().to_string(),
            detail: format!("expected 3 dimensions, got {:?}", images.dims),
        });
    };
    if labels.dims != [n] {
        return Err(Error::Dataset {
            path: labels_path.display().to_string(),
            detail: format!("{:?} labels for {n} images", labels.dims),
        });
    }
    let pixels: Vec<f64> = images.payload.iter().map(|&b| b as f64 / 255.0).collect();
    Dataset {
        images: Array2::from_shape_vec((n, h * w), pixels).expect("length checked"),
        shape: Shape::Image { c: 1, h, w },
        labels: labels.payload,
        split,
        n_classes: 10,
    }
    .checked(images_path)
}

const CIFAR_RECORD: usize = 3073;

/// Loads CIFAR-10 binary batches: each record is 1 label byte followed by
/// 3072 pixel bytes as channel-major 32x32 R, G, B planes; pixels scaled
/// by 1/255. Batches are concatenated in the order given.
pub fn load_cifar10(batch_paths: &[impl AsRef<Path>], split: Split) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut first = None;
    for p in batch_paths {
        let path = p.as_ref();
        first.get_or_insert_with(|| path.to_path_buf());
        let fail = |detail: String| Error::Dataset { path: path.display().to_string(), detail };
        let bytes = read_maybe_gz(path)?;
        if bytes.is_empty() {
            return Err(fail("empty batch file".into()));
        }
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(fail(format!(
                "{} bytes is not a multiple of the {CIFAR_RECORD}-byte record",
                bytes.len()
            )));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            if rec[0] > 9 {
                return Err(fail(format!("label byte {} outside 0..10", rec[0])));
            }
            labels.push(rec[0]);
            pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
        }
    }
    let Some(path) = first else {
        return Err(Error::Dataset { path: "<none>".into(), detail: "no batch files given".into() });
    };
    Dataset {
        images: Array2::from_shape_vec((labels.len(), 3072), pixels).expect("record-sized chunks"),
        shape: Shape::Image { c: 3, h: 32, w: 32 },
        labels,
        split,
        n_classes: 10,
    }
    .checked(&path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropMode {
    /// Offsets drawn uniformly per image.
    Random,
    /// Fixed top-left offset `((h - crop_h) / 2, (w - crop_w) / 2)`.
    Center,
}

/// Crops every image to `crop_h x crop_w`, keeping all channels. Random
/// mode draws each image's offset uniformly over the valid range; center
/// mode is deterministic and ignores the rng.
pub fn crop_augment(
    d: &Dataset,
    crop_h: usize,
    crop_w: usize,
    rng: &mut impl Rng,
    mode: CropMode,
) -> Result<Dataset> {
    let Shape::Image { c, h, w } = d.shape else {
        return Err(Error::InvalidParam("cropping needs image-shaped data".into()));
    };
    if crop_h == 0 || crop_h > h || crop_w == 0 || crop_w > w {
        return Err(Error::InvalidParam(format!(
            "crop {crop_h}x{crop_w} does not fit in {h}x{w}"
        )));
    }
    let n = d.len();
    let mut images = Array2::zeros((n, c * crop_h * crop_w));
    for i in 0..n {
        let (dy, dx) = match mode {
            CropMode::Random => (rng.gen_range(0..=h - crop_h), rng.gen_range(0..=w - crop_w)),
            CropMode::Center => ((h - crop_h) / 2, (w - crop_w) / 2),
        };
        let src = d.images.row(i);
        let mut dst = images.row_mut(i);
        for ch in 0..c {
            for y in 0..crop_h {
                for x in 0..crop_w {
                    dst[(ch * crop_h + y) * crop_w + x] =
                        src[(ch * h + (y + dy)) * w + (x + dx)];
                }
            }
        }
    }
    Ok(Dataset {
        images,
        shape: Shape::Image { c, h: crop_h, w: crop_w },
        labels: d.labels.clone(),
        split: d.split,
        n_classes: d.n_classes,
    })
}

/// Deterministic 10-class synthetic shape set, 8x8 single-channel: bars,
/// diagonals, crosses, and corner boxes with seeded jitter in position,
/// intensity, and pixel noise. Exists so training and evaluation pipelines
/// can run hermetically.
pub fn synthetic(n: usize, seed: u64, split: Split) -> Dataset {
    const H: usize = 8;
    let mut rng = substream(seed, "synthetic", 0);
    let mut images = Array2::zeros((n, H * H));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = (i % 10) as u8;
        let jitter = rng.gen_range(0..2usize);
        let scale: f64 = rng.gen_range(0.7..1.0);
        let mut row = images.row_mut(i);
        let mut put = |y: usize, x: usize| {
            if y < H && x < H {
                row[y * H + x] = scale;
            }
        };
        match class {
            0 => (0..H).for_each(|x| put(1 + jitter, x)),
            1 => (0..H).for_each(|x| put(5 + jitter, x)),
            2 => (0..H).for_each(|y| put(y, 1 + jitter)),
            3 => (0..H).for_each(|y| put(y, 5 + jitter)),
            4 => (0..H).for_each(|k| put(k, k)),
            5 => (0..H).for_each(|k| put(k, H - 1 - k)),
            6 => {
                (0..H).for_each(|x| put(3 + jitter, x));
                (0..H).for_each(|y| put(y, 3 + jitter));
            }
            7 => (0..3).for_each(|y| (0..3).for_each(|x| put(y + jitter, x + jitter))),
            8 => (0..3).for_each(|y| (0..3).for_each(|x| put(y + 4, x + 4 + jitter))),
            _ => {
                (0..H).for_each(|x| {
                    put(0, x);
                    put(H - 1, x);
                    put(x, 0);
                    put(x, H - 1);
                });
            }
        }
        for v in row.iter_mut() {
            *v = (*v + rng.gen_range(0.0..0.15)).clamp(0.0, 1.0);
        }
        labels.push(class);
    }
    Dataset {
        images,
        shape: Shape::Image { c: 1, h: H, w: H },
        labels,
        split,
        n_classes: 10,
    }
}
