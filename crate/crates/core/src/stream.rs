//! Dataset ingestion and deterministic stream batching.
//!
//! Images are stored channel-planar (`channels × height × width`) as `f32` in `[0, 1]`.
//! The on-disk record layout is the CIFAR-10 binary layout: one label byte followed by
//! the planar pixel bytes. [`load_cifar10_binary`] is the fixed 3×32×32, 10-class case of
//! the general [`parse_records`].

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub const CIFAR10: ImageShape = ImageShape::new(3, 32, 32);

    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        ImageShape {
            channels,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

/// A planar image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    shape: ImageShape,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(shape: ImageShape, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != shape.len() {
            return Err(Error::contract(format!(
                "image of shape {:?} needs {} pixels, got {}",
                shape.dims(),
                shape.len(),
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::contract(format!(
                "pixel {bad} has value {} outside [0, 1]",
                pixels[bad]
            )));
        }
        Ok(Image { shape, pixels })
    }

    pub fn zeros(shape: ImageShape) -> Self {
        Image {
            shape,
            pixels: vec![0.0; shape.len()],
        }
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Quantizes to bytes (`round(p · 255)`), the inverse of the loader's `/255` scaling.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|p| (p * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub image: Image,
    pub label: usize,
}

/// A labeled image collection in canonical (file) order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub shape: ImageShape,
    pub num_classes: usize,
    pub examples: Vec<LabeledExample>,
}

impl Dataset {
    pub fn new(shape: ImageShape, num_classes: usize, examples: Vec<LabeledExample>) -> Result<Self> {
        for (i, ex) in examples.iter().enumerate() {
            if ex.image.shape() != shape {
                return Err(Error::contract(format!("example {i} has a mismatched shape")));
            }
            if ex.label >= num_classes {
                return Err(Error::contract(format!(
                    "example {i} has label {} but the dataset declares {num_classes} classes",
                    ex.label
                )));
            }
        }
        Ok(Dataset {
            shape,
            num_classes,
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.examples.iter().map(|e| e.label)
    }

    /// Splits off the last `count` examples of a seeded permutation, returning them as a
    /// second dataset. The remaining examples keep their canonical order.
    pub fn split_holdout(self, count: usize, seed: u64) -> (Dataset, Dataset) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut held = vec![false; self.len()];
        for &i in order.iter().rev().take(count) {
            held[i] = true;
        }
        let (mut keep, mut hold) = (Vec::new(), Vec::new());
        for (ex, h) in self.examples.into_iter().zip(held) {
            if h {
                hold.push(ex)
            } else {
                keep.push(ex)
            }
        }
        (
            Dataset {
                shape: self.shape,
                num_classes: self.num_classes,
                examples: keep,
            },
            Dataset {
                shape: self.shape,
                num_classes: self.num_classes,
                examples: hold,
            },
        )
    }
}

/// Parses label-prefixed planar byte records.
pub fn parse_records(bytes: &[u8], shape: ImageShape, num_classes: usize) -> Result<Dataset> {
    let record = shape.len() + 1;
    if !bytes.len().is_multiple_of(record) {
        let offset = (bytes.len() / record * record) as u64;
        return Err(Error::format(
            offset,
            format!(
                "truncated record: {} trailing bytes, records are {record} bytes",
                bytes.len() % record
            ),
        ));
    }
    let mut examples = Vec::with_capacity(bytes.len() / record);
    for (i, chunk) in bytes.chunks_exact(record).enumerate() {
        let label = chunk[0] as usize;
        if label >= num_classes {
            return Err(Error::format(
                (i * record) as u64,
                format!("label byte {label} is not below the class count {num_classes}"),
            ));
        }
        let pixels = chunk[1..].iter().map(|&b| b as f32 / 255.0).collect();
        examples.push(LabeledExample {
            image: Image { shape, pixels },
            label,
        });
    }
    Ok(Dataset {
        shape,
        num_classes,
        examples,
    })
}

pub fn load_records(path: impl AsRef<Path>, shape: ImageShape, num_classes: usize) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_records(&bytes, shape, num_classes)
}

/// Loads a CIFAR-10 binary batch file (3073-byte records).
pub fn load_cifar10_binary(path: impl AsRef<Path>) -> Result<Dataset> {
    load_records(path, ImageShape::CIFAR10, 10)
}

/// Loads and concatenates several record files of the same layout.
pub fn load_record_files<P: AsRef<Path>>(
    paths: &[P],
    shape: ImageShape,
    num_classes: usize,
) -> Result<Dataset> {
    let mut examples = Vec::new();
    for p in paths {
        examples.extend(load_records(p, shape, num_classes)?.examples);
    }
    Ok(Dataset {
        shape,
        num_classes,
        examples,
    })
}

pub fn encode_records(examples: &[LabeledExample]) -> Vec<u8> {
    let mut out = Vec::new();
    for ex in examples {
        out.push(ex.label as u8);
        out.extend(ex.image.to_bytes());
    }
    out
}

pub fn write_records(path: impl AsRef<Path>, examples: &[LabeledExample]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_records(examples)).map_err(|e| Error::io(path, e))
}

/// One unit of the stream. Borrows its examples from the source dataset.
#[derive(Clone, Debug)]
pub struct StreamBatch<'a> {
    pub index: usize,
    /// Canonical dataset positions of the examples, parallel to `examples`.
    pub positions: Vec<usize>,
    pub examples: Vec<&'a LabeledExample>,
}

impl StreamBatch<'_> {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Partitions a seeded permutation of `dataset` into consecutive batches.
pub fn stream_batches(dataset: &Dataset, batch_size: usize, seed: u64) -> Result<Vec<StreamBatch<'_>>> {
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    batches_in_order(dataset, batch_size, order)
}

/// Batches the dataset in canonical order (no shuffle), for streams whose order matters.
pub fn stream_batches_in_order(dataset: &Dataset, batch_size: usize) -> Result<Vec<StreamBatch<'_>>> {
    batches_in_order(dataset, batch_size, (0..dataset.len()).collect())
}

fn batches_in_order(dataset: &Dataset, batch_size: usize, order: Vec<usize>) -> Result<Vec<StreamBatch<'_>>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    if dataset.is_empty() {
        return Err(Error::config("cannot stream an empty dataset"));
    }
    Ok(order
        .chunks(batch_size)
        .enumerate()
        .map(|(index, chunk)| StreamBatch {
            index,
            positions: chunk.to_vec(),
            examples: chunk.iter().map(|&i| &dataset.examples[i]).collect(),
        })
        .collect())
}
