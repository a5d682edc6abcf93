//! Minimal differentiable-model kernel: a fixed layer set, two losses, SGD/Adam.

mod layers;
mod loss;
mod model;
mod optim;
mod tensor;

pub use layers::{Conv2d, Layer, Linear, Param};
pub use loss::{cross_entropy, cross_entropy_single, mse, mse_with_grad, softmax, Loss};
pub use model::{build_model, Arch, Model, ModelCheckpoint};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use tensor::Tensor;

use crate::stream::Image;

/// Stacks images into a `[N, C, H, W]` batch.
pub fn images_to_tensor<'a, I>(images: I) -> Tensor
where
    I: IntoIterator<Item = &'a Image>,
{
    let mut shape = None;
    let mut data = Vec::new();
    let mut n = 0;
    for img in images {
        shape.get_or_insert(img.shape());
        data.extend(img.pixels().iter().map(|&p| p as f64));
        n += 1;
    }
    let dims = shape.map(|s| s.dims()).unwrap_or([0, 0, 0]);
    Tensor::new(vec![n, dims[0], dims[1], dims[2]], data).expect("images share one shape")
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
