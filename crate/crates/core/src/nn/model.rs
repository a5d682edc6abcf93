use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Cache, Conv2d, Layer, Linear, Param};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::stream::ImageShape;

/// The fixed architectures.
///
/// * `SimpleCnn`: 2 conv blocks (16, 32) → flatten → FC 64 (a feature matcher).
/// * `IntermediateCnn`: 3 conv blocks (16, 32, 64) → flatten → FC 128 (a feature matcher).
/// * `CompactNet`: 2 conv blocks (16, 32) → flatten → FC 128 → ReLU → FC `output_dim` (the classifier).
///
/// A conv block is 3×3 same-padded conv → ReLU → 2×2 max-pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "SimpleCNN")]
    SimpleCnn,
    #[serde(rename = "IntermediateCNN")]
    IntermediateCnn,
    CompactNet,
}

impl Arch {
    pub fn id(self) -> u32 {
        match self {
            Arch::SimpleCnn => 0,
            Arch::IntermediateCnn => 1,
            Arch::CompactNet => 2,
        }
    }

    pub fn from_id(id: u32) -> Result<Self> {
        match id {
            0 => Ok(Arch::SimpleCnn),
            1 => Ok(Arch::IntermediateCnn),
            2 => Ok(Arch::CompactNet),
            other => Err(Error::config(format!("unknown architecture id {other}"))),
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "SimpleCNN" | "SimpleCnn" => Ok(Arch::SimpleCnn),
            "IntermediateCNN" | "IntermediateCnn" => Ok(Arch::IntermediateCnn),
            "CompactNet" => Ok(Arch::CompactNet),
            other => Err(Error::config(format!("unknown architecture `{other}`"))),
        }
    }

    /// Feature width of the matcher architectures (ignored for `CompactNet`).
    pub fn feature_dim(self) -> usize {
        match self {
            Arch::SimpleCnn => 64,
            Arch::IntermediateCnn | Arch::CompactNet => 128,
        }
    }
}

/// A feed-forward network over the fixed layer set.
#[derive(Clone, Debug)]
pub struct Model {
    arch: Option<Arch>,
    seed: u64,
    input_shape: Vec<usize>,
    output_dim: usize,
    layers: Vec<Layer>,
    caches: Option<Vec<Cache>>,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch
            && self.input_shape == other.input_shape
            && self.layers == other.layers
    }
}

/// Builds one of the fixed architectures. `output_dim` sets the logit count of
/// `CompactNet`; the matchers have a fixed feature width.
pub fn build_model(arch: Arch, input: ImageShape, output_dim: usize, seed: u64) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks: &[usize] = match arch {
        Arch::SimpleCnn | Arch::CompactNet => &[16, 32],
        Arch::IntermediateCnn => &[16, 32, 64],
    };
    let mut layers = Vec::new();
    let mut ch = input.channels;
    for &out in blocks {
        layers.push(Layer::Conv(Conv2d::new(ch, out, &mut rng)));
        layers.push(Layer::Relu);
        layers.push(Layer::MaxPool);
        ch = out;
    }
    layers.push(Layer::Flatten);
    let pooled = 1usize << blocks.len();
    if input.height < pooled || input.width < pooled {
        return Err(Error::config(format!(
            "{arch:?} needs images of at least {pooled}×{pooled}, got {}×{}",
            input.height, input.width
        )));
    }
    let flat = ch * (input.height / pooled) * (input.width / pooled);
    match arch {
        Arch::CompactNet => {
            if output_dim == 0 {
                return Err(Error::config("CompactNet needs at least one output"));
            }
            layers.push(Layer::Linear(Linear::new(flat, 128, &mut rng)));
            layers.push(Layer::Relu);
            layers.push(Layer::Linear(Linear::new(128, output_dim, &mut rng)));
        }
        _ => layers.push(Layer::Linear(Linear::new(flat, arch.feature_dim(), &mut rng))),
    }
    let mut model = Model::from_layers(input.dims().to_vec(), layers)?;
    model.arch = Some(arch);
    model.seed = seed;
    Ok(model)
}

impl Model {
    /// Assembles a model from explicit layers; `input_shape` excludes the batch axis.
    pub fn from_layers(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let mut shape = input_shape.clone();
        for layer in &layers {
            shape = layer.output_shape(&shape)?;
        }
        if shape.len() != 1 {
            return Err(Error::contract(format!("model must end in a vector output, got {shape:?}")));
        }
        Ok(Model {
            arch: None,
            seed: 0,
            input_shape,
            output_dim: shape[0],
            layers,
            caches: None,
        })
    }

    pub fn arch(&self) -> Option<Arch> {
        self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::contract(format!(
                "input of shape {:?} does not match model input [N, {:?}]",
                x.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Forward pass that records the activations needed by [`Model::backward`].
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut act = x.clone();
        for layer in &self.layers {
            let (next, cache) = layer.forward(&act, true)?;
            caches.push(cache.expect("cache requested"));
            act = next;
        }
        self.caches = Some(caches);
        Ok(act)
    }

    /// Forward pass without recording; never mutates the model.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut act = x.clone();
        for layer in &self.layers {
            act = layer.forward(&act, false)?.0;
        }
        Ok(act)
    }

    /// Back-propagates `grad_output` (loss gradient w.r.t. the outputs of the last
    /// forward pass), overwriting every parameter gradient. Returns the gradient w.r.t.
    /// the inputs when `track_input` is set.
    pub fn backward(&mut self, grad_output: &Tensor, track_input: bool) -> Result<Option<Tensor>> {
        let caches = self
            .caches
            .take()
            .ok_or_else(|| Error::contract("backward called without a preceding forward"))?;
        if grad_output.shape() != [grad_output.batch(), self.output_dim] {
            return Err(Error::contract(format!(
                "output gradient of shape {:?} does not match [N, {}]",
                grad_output.shape(),
                self.output_dim
            )));
        }
        let mut grad = grad_output.clone();
        for (i, (layer, cache)) in self.layers.iter_mut().zip(caches).enumerate().rev() {
            match layer.backward(cache, &grad, i > 0 || track_input)? {
                Some(g) => grad = g,
                None => return Ok(None),
            }
        }
        Ok(Some(grad))
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.layers.iter().flat_map(|l| l.params())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut())
    }

    pub fn param_count(&self) -> usize {
        self.params().map(Param::len).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params().flat_map(|p| p.value.iter().copied()).collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.params().flat_map(|p| p.grad.iter().copied()).collect()
    }

    pub fn load_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::contract(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                values.len()
            )));
        }
        let mut rest = values;
        for p in self.params_mut() {
            let (head, tail) = rest.split_at(p.len());
            p.value.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    pub fn checkpoint(&self, validation_accuracy: f64) -> ModelCheckpoint {
        ModelCheckpoint {
            model: Model {
                caches: None,
                ..self.clone()
            },
            validation_accuracy,
        }
    }
}

/// An immutable parameter snapshot plus the validation accuracy that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    model: Model,
    validation_accuracy: f64,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"SDCK";

impl ModelCheckpoint {
    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn validation_accuracy(&self) -> f64 {
        self.validation_accuracy
    }

    /// Serializes as:
    ///
    /// ```text
    /// b"SDCK" | arch_id u32 | seed u64 | channels u32 | height u32 | width u32
    ///         | output_dim u32 | validation_accuracy f64 | param_count u64 | param_count × f32
    /// ```
    ///
    /// All little-endian. Parameters are narrowed to `f32`.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let arch = self
            .model
            .arch
            .ok_or_else(|| Error::contract("only built architectures can be serialized"))?;
        let shape = &self.model.input_shape;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend(arch.id().to_le_bytes());
        out.extend(self.model.seed.to_le_bytes());
        for &d in shape {
            out.extend((d as u32).to_le_bytes());
        }
        out.extend((self.model.output_dim as u32).to_le_bytes());
        out.extend(self.validation_accuracy.to_le_bytes());
        out.extend((self.model.param_count() as u64).to_le_bytes());
        for v in self.model.params().flat_map(|p| p.value.iter()) {
            out.extend((*v as f32).to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        const HEADER: usize = 4 + 4 + 8 + 12 + 4 + 8 + 8;
        if bytes.len() < HEADER {
            return Err(Error::format(0, "checkpoint shorter than its header"));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "bad checkpoint magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let arch = Arch::from_id(u32_at(4))?;
        let seed = u64_at(8);
        let shape = ImageShape::new(u32_at(16) as usize, u32_at(20) as usize, u32_at(24) as usize);
        let output_dim = u32_at(28) as usize;
        let acc = f64::from_le_bytes(bytes[32..40].try_into().unwrap());
        let count = u64_at(40) as usize;
        if bytes.len() != HEADER + 4 * count {
            return Err(Error::format(HEADER as u64, "parameter block length mismatch"));
        }
        let mut model = build_model(arch, shape, output_dim, seed)?;
        if model.param_count() != count {
            return Err(Error::format(40, "parameter count does not match the architecture"));
        }
        let values: Vec<f64> = bytes[HEADER..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        model.load_flat_params(&values)?;
        Ok(ModelCheckpoint {
            model,
            validation_accuracy: acc,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
