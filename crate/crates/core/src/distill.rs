//! Distilled reservoir and the per-batch distillation step: per class, match the matcher's
//! mean output on the distilled images to its mean output on the incoming batch, then move
//! both the matcher and the distilled pixels along the gradient of that mismatch.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{build_model, mse_with_grad, Model, Optimizer, Tensor};
use crate::reservoir::class_capacities;
use crate::stream::{Image, ImageShape, LabeledExample, StreamBatch};

/// Per-class synthetic images held as flat `f64` planes in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DistilledReservoir {
    shape: ImageShape,
    classes: Vec<Vec<f64>>,
}

impl DistilledReservoir {
    /// Builds a reservoir from per-class image lists (outer index = class).
    pub fn from_images(shape: ImageShape, per_class: &[Vec<Image>]) -> Result<Self> {
        let mut classes = Vec::with_capacity(per_class.len());
        for images in per_class {
            let mut flat = Vec::with_capacity(images.len() * shape.len());
            for img in images {
                if img.shape() != shape {
                    return Err(Error::contract("distilled image shape differs from the reservoir shape"));
                }
                flat.extend(img.pixels().iter().map(|&p| p as f64));
            }
            classes.push(flat);
        }
        Ok(DistilledReservoir { shape, classes })
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_len(&self, class: usize) -> usize {
        self.classes[class].len() / self.shape.len()
    }

    pub fn len(&self) -> usize {
        (0..self.classes.len()).map(|c| self.class_len(c)).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All pixels of one class, image after image.
    pub fn class_pixels(&self, class: usize) -> &[f64] {
        &self.classes[class]
    }

    pub fn image(&self, class: usize, i: usize) -> &[f64] {
        let n = self.shape.len();
        &self.classes[class][i * n..(i + 1) * n]
    }

    pub fn class_tensor(&self, class: usize) -> Tensor {
        let [c, h, w] = self.shape.dims();
        Tensor::new(vec![self.class_len(class), c, h, w], self.classes[class].clone()).expect("whole images")
    }

    /// Every distilled image with its class label, class by class.
    pub fn training_set(&self) -> (Tensor, Vec<usize>) {
        let [c, h, w] = self.shape.dims();
        let data: Vec<f64> = self.classes.concat();
        let labels = (0..self.classes.len())
            .flat_map(|k| std::iter::repeat_n(k, self.class_len(k)))
            .collect::<Vec<_>>();
        (Tensor::new(vec![labels.len(), c, h, w], data).expect("whole images"), labels)
    }

    /// Converts back to images (pixels narrowed to `f32`).
    pub fn to_images(&self, class: usize) -> Vec<Image> {
        (0..self.class_len(class))
            .map(|i| {
                let px = self.image(class, i).iter().map(|&v| v as f32).collect();
                Image::new(self.shape, px).expect("clamped pixels")
            })
            .collect()
    }
}

/// Fills `S` slots (split per class as in the stratified reservoir) with copies of real images
/// in arrival order, consuming whole batches until every class is full. Returns the reservoir
/// and the number of batches consumed.
pub fn init_distilled(
    batches: &[StreamBatch],
    total: usize,
    num_classes: usize,
    shape: ImageShape,
) -> Result<(DistilledReservoir, usize)> {
    let caps = class_capacities(total, num_classes)?;
    let mut classes: Vec<Vec<f64>> = caps.iter().map(|&k| Vec::with_capacity(k * shape.len())).collect();
    let full = |classes: &[Vec<f64>], c: usize| classes[c].len() == caps[c] * shape.len();
    for (i, batch) in batches.iter().enumerate() {
        for e in &batch.examples {
            if e.label >= num_classes {
                return Err(Error::contract(format!("label {} not below {num_classes}", e.label)));
            }
            if !full(&classes, e.label) {
                classes[e.label].extend(e.image.pixels().iter().map(|&p| p as f64));
            }
        }
        if (0..num_classes).all(|c| full(&classes, c)) {
            return Ok((DistilledReservoir { shape, classes }, i + 1));
        }
    }
    Err(Error::Initialization {
        missing: (0..num_classes).filter(|&c| !full(&classes, c)).collect(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillDirection {
    /// `x ← x − η·g`
    #[default]
    Descent,
    /// `x ← x + η·g`, the literal reading of the update rule.
    Ascent,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    /// Image learning rate η_d.
    pub lr: f64,
    pub direction: DistillDirection,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lr: 0.1,
            direction: DistillDirection::Descent,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassLoss {
    pub class: usize,
    pub before: f64,
    pub after: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillStepReport {
    /// One entry per class present in the batch, ascending.
    pub losses: Vec<ClassLoss>,
    /// L2 norm of the total matcher parameter change.
    pub matcher_update_norm: f64,
    /// L2 norm of all image gradients.
    pub image_grad_norm: f64,
}

/// Splits a batch by label.
fn group_by_class<'e>(batch: &[&'e LabeledExample], num_classes: usize) -> Result<Vec<Vec<&'e LabeledExample>>> {
    let mut groups = vec![Vec::new(); num_classes];
    for &e in batch {
        groups
            .get_mut(e.label)
            .ok_or_else(|| Error::contract(format!("label {} not below {num_classes}", e.label)))?
            .push(e);
    }
    Ok(groups)
}

fn mean_rows(out: &Tensor, rows: std::ops::Range<usize>) -> Vec<f64> {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; out.sample_len()];
    for i in rows {
        for (m, v) in mean.iter_mut().zip(out.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// The per-class matching loss: MSE between mean matcher outputs on the distilled images and
/// on the batch images of one class.
pub fn class_matching_loss(matcher: &Model, distilled: &Tensor, batch: &Tensor) -> Result<f64> {
    let a = matcher.infer(distilled)?;
    let b = matcher.infer(batch)?;
    let (loss, _) = mse_with_grad(&mean_rows(&a, 0..a.batch()), &mean_rows(&b, 0..b.batch()))?;
    Ok(loss)
}

/// Loss and its gradient with respect to the distilled images of one class; accumulates
/// matcher parameter gradients as a side effect.
fn class_loss_and_grad(matcher: &mut Model, distilled: &Tensor, batch: &Tensor) -> Result<(f64, Vec<f64>)> {
    let (nr, nb) = (distilled.batch(), batch.batch());
    let mut joint = distilled.data().to_vec();
    joint.extend_from_slice(batch.data());
    let mut shape = distilled.shape().to_vec();
    shape[0] = nr + nb;
    let out = matcher.forward(&Tensor::new(shape, joint)?)?;
    let (loss, g) = mse_with_grad(&mean_rows(&out, 0..nr), &mean_rows(&out, nr..nr + nb))?;
    let d = out.sample_len();
    let mut grad = Tensor::zeros(out.shape().to_vec());
    for (i, row) in grad.data_mut().chunks_mut(d).enumerate() {
        let scale = if i < nr { 1.0 / nr as f64 } else { -1.0 / nb as f64 };
        row.iter_mut().zip(&g).for_each(|(r, gi)| *r = gi * scale);
    }
    let gx = matcher.backward(&grad, true)?.expect("input gradient requested");
    let mut gx = gx.into_data();
    gx.truncate(distilled.data().len());
    Ok((loss, gx))
}

/// Gradient of the class-`c` matching loss with respect to the distilled images of `c`.
pub fn distill_image_gradient(matcher: &mut Model, distilled: &Tensor, batch: &Tensor) -> Result<Vec<f64>> {
    Ok(class_loss_and_grad(matcher, distilled, batch)?.1)
}

/// One distillation pass over the classes present in `batch`. A `None` optimizer keeps the
/// matcher frozen.
pub fn distill_step(
    reservoir: &mut DistilledReservoir,
    batch: &[&LabeledExample],
    matcher: &mut Model,
    mut optimizer: Option<&mut Optimizer>,
    config: &DistillConfig,
) -> Result<DistillStepReport> {
    let groups = group_by_class(batch, reservoir.num_classes())?;
    let start = optimizer.is_some().then(|| matcher.flat_params());
    let sign = match config.direction {
        DistillDirection::Descent => -1.0,
        DistillDirection::Ascent => 1.0,
    };
    let mut report = DistillStepReport::default();
    let mut grad_sq = 0.0;
    for (c, examples) in groups.iter().enumerate() {
        if examples.is_empty() {
            continue;
        }
        if reservoir.class_len(c) == 0 {
            return Err(Error::contract(format!("class {c} has no distilled slots; initialize the reservoir first")));
        }
        let distilled = reservoir.class_tensor(c);
        let real = crate::nn::images_to_tensor(examples.iter().map(|e| &e.image));
        let (before, g) = class_loss_and_grad(matcher, &distilled, &real)?;
        if let Some(opt) = optimizer.as_deref_mut() {
            opt.step(matcher);
        }
        grad_sq += g.iter().map(|v| v * v).sum::<f64>();
        for (x, gi) in reservoir.classes[c].iter_mut().zip(&g) {
            *x = (*x + sign * config.lr * gi).clamp(0.0, 1.0);
        }
        let after = class_matching_loss(matcher, &reservoir.class_tensor(c), &real)?;
        report.losses.push(ClassLoss { class: c, before, after });
    }
    report.image_grad_norm = grad_sq.sqrt();
    if let Some(start) = start {
        report.matcher_update_norm = start
            .iter()
            .zip(matcher.flat_params())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReinitSchedule {
    #[default]
    Never,
    /// Redraw the matcher after every K-th batch.
    Every(usize),
}

/// Seed used when the matcher is redrawn at `batch_index`.
pub fn reinit_seed(seed: u64, batch_index: usize) -> u64 {
    seed ^ (batch_index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Redraws the matcher's parameters when the schedule fires at `batch_index`; returns whether
/// it did.
pub fn matcher_reinit(matcher: &mut Model, schedule: ReinitSchedule, batch_index: usize, seed: u64) -> Result<bool> {
    let k = match schedule {
        ReinitSchedule::Never => return Ok(false),
        ReinitSchedule::Every(0) => return Err(Error::config("matcher reinit interval must be at least 1")),
        ReinitSchedule::Every(k) => k,
    };
    if !(batch_index + 1).is_multiple_of(k) {
        return Ok(false);
    }
    let arch = matcher
        .arch()
        .ok_or_else(|| Error::contract("only built architectures can be re-initialized"))?;
    let &[c, h, w] = matcher.input_shape() else {
        return Err(Error::contract("matcher input must be an image"));
    };
    *matcher = build_model(arch, ImageShape::new(c, h, w), matcher.output_dim(), reinit_seed(seed, batch_index))?;
    Ok(true)
}

/// Writes each class's distilled images as planar `u8` (×255, rounded) to
/// `rd_batch{index}_class{c}.bin`.
pub fn export_distilled(dir: impl AsRef<Path>, batch_index: usize, reservoir: &DistilledReservoir) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for c in 0..reservoir.num_classes() {
        let bytes: Vec<u8> = reservoir.classes[c]
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let path = dir.join(format!("rd_batch{batch_index}_class{c}.bin"));
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
