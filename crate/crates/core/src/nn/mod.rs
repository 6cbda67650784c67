//! A small CPU neural-network toolkit with hand-written backpropagation.
//!
//! Tensors are dynamically shaped `f32` arrays. Image batches use NCHW
//! layout; dense activations are `[N, features]`. Every layer caches what
//! its backward pass needs during `forward`, so a forward/backward pair must
//! not be interleaved with another forward on the same layer.

mod archive;
mod backbone;
mod layers;
mod optim;

pub use archive::{Archive, ArchiveTensor, ARCHIVE_VERSION};
pub use backbone::{images_to_batch, Backbone, BackboneKind, XceptionConfig, INPUT_SIDE};
pub use layers::{
    AvgPool2d, BatchNorm, Conv2d, Dense, DepthwiseConv2d, GlobalAvgPool, MaxPool2d, Padding, Relu,
    Residual,
};
pub use optim::{Adam, Sgd};

use ndarray::ArrayD;
use rand::Rng;

use crate::error::Result;

pub type Tensor = ArrayD<f32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// A trainable array and its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.raw_dim());
        Self { value, grad }
    }
}

/// Walks the trainable parameters and non-trainable buffers of a model in a
/// stable order with hierarchical names.
pub trait StateVisitor {
    fn param(&mut self, name: &str, param: &mut Param);
    fn buffer(&mut self, _name: &str, _buffer: &mut Tensor) {}
}

pub trait Module {
    fn visit_state(&mut self, prefix: &str, visitor: &mut dyn StateVisitor);

    fn zero_grad(&mut self) {
        struct Zero;
        impl StateVisitor for Zero {
            fn param(&mut self, _: &str, p: &mut Param) {
                p.grad.fill(0.0);
            }
        }
        self.visit_state("", &mut Zero);
    }

    fn num_params(&mut self) -> usize {
        struct Count(usize);
        impl StateVisitor for Count {
            fn param(&mut self, _: &str, p: &mut Param) {
                self.0 += p.value.len();
            }
        }
        let mut c = Count(0);
        self.visit_state("", &mut c);
        c.0
    }

    /// Copies every parameter and buffer into an archive section.
    fn export_state(&mut self, prefix: &str, archive: &mut Archive) {
        struct Export<'a>(&'a mut Archive);
        impl StateVisitor for Export<'_> {
            fn param(&mut self, name: &str, p: &mut Param) {
                self.0.push(name, &p.value);
            }
            fn buffer(&mut self, name: &str, b: &mut Tensor) {
                self.0.push(name, b);
            }
        }
        self.visit_state(prefix, &mut Export(archive));
    }

    /// Loads every parameter and buffer from an archive; names and shapes must match.
    fn import_state(&mut self, prefix: &str, archive: &Archive) -> Result<()> {
        struct Import<'a> {
            archive: &'a Archive,
            err: Option<crate::Error>,
        }
        impl Import<'_> {
            fn load(&mut self, name: &str, dst: &mut Tensor) {
                if self.err.is_some() {
                    return;
                }
                match self.archive.tensor(name) {
                    Ok(t) if t.shape() == dst.shape() => dst.assign(&t),
                    Ok(t) => {
                        self.err = Some(crate::Error::Checkpoint(format!(
                            "tensor {name} has shape {:?}, model expects {:?}",
                            t.shape(),
                            dst.shape()
                        )))
                    }
                    Err(e) => self.err = Some(e),
                }
            }
        }
        impl StateVisitor for Import<'_> {
            fn param(&mut self, name: &str, p: &mut Param) {
                self.load(name, &mut p.value);
            }
            fn buffer(&mut self, name: &str, b: &mut Tensor) {
                self.load(name, b);
            }
        }
        let mut imp = Import { archive, err: None };
        self.visit_state(prefix, &mut imp);
        imp.err.map_or(Ok(()), Err)
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    Depthwise(DepthwiseConv2d),
    BatchNorm(BatchNorm),
    Relu(Relu),
    MaxPool(MaxPool2d),
    AvgPool(AvgPool2d),
    GlobalAvgPool(GlobalAvgPool),
    Residual(Box<Residual>),
}

impl Layer {
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match self {
            Layer::Dense(l) => l.forward(x),
            Layer::Conv2d(l) => l.forward(x),
            Layer::Depthwise(l) => l.forward(x),
            Layer::BatchNorm(l) => l.forward(x, mode),
            Layer::Relu(l) => Ok(l.forward(x)),
            Layer::MaxPool(l) => l.forward(x),
            Layer::AvgPool(l) => l.forward(x),
            Layer::GlobalAvgPool(l) => l.forward(x),
            Layer::Residual(l) => l.forward(x, mode),
        }
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        match self {
            Layer::Dense(l) => l.backward(grad),
            Layer::Conv2d(l) => l.backward(grad),
            Layer::Depthwise(l) => l.backward(grad),
            Layer::BatchNorm(l) => l.backward(grad),
            Layer::Relu(l) => l.backward(grad),
            Layer::MaxPool(l) => l.backward(grad),
            Layer::AvgPool(l) => l.backward(grad),
            Layer::GlobalAvgPool(l) => l.backward(grad),
            Layer::Residual(l) => l.backward(grad),
        }
    }

    /// Drops cached activations.
    pub fn clear_cache(&mut self) {
        match self {
            Layer::Dense(l) => l.input = None,
            Layer::Conv2d(l) => l.input = None,
            Layer::Depthwise(l) => l.input = None,
            Layer::BatchNorm(l) => l.cache = None,
            Layer::Relu(l) => l.mask = None,
            Layer::MaxPool(l) => l.argmax = None,
            Layer::AvgPool(l) => l.in_shape = None,
            Layer::GlobalAvgPool(l) => l.in_shape = None,
            Layer::Residual(l) => {
                l.main.clear_cache();
                if let Some(s) = l.skip.as_mut() {
                    s.clear_cache();
                }
            }
        }
    }
}

impl Module for Layer {
    fn visit_state(&mut self, prefix: &str, v: &mut dyn StateVisitor) {
        match self {
            Layer::Dense(l) => {
                v.param(&join(prefix, "weight"), &mut l.weight);
                v.param(&join(prefix, "bias"), &mut l.bias);
            }
            Layer::Conv2d(l) => {
                v.param(&join(prefix, "weight"), &mut l.weight);
                v.param(&join(prefix, "bias"), &mut l.bias);
            }
            Layer::Depthwise(l) => {
                v.param(&join(prefix, "weight"), &mut l.weight);
                v.param(&join(prefix, "bias"), &mut l.bias);
            }
            Layer::BatchNorm(l) => {
                v.param(&join(prefix, "gamma"), &mut l.gamma);
                v.param(&join(prefix, "beta"), &mut l.beta);
                v.buffer(&join(prefix, "running_mean"), &mut l.running_mean);
                v.buffer(&join(prefix, "running_var"), &mut l.running_var);
            }
            Layer::Residual(l) => {
                l.main.visit_state(&join(prefix, "main"), v);
                if let Some(s) = l.skip.as_mut() {
                    s.visit_state(&join(prefix, "skip"), v);
                }
            }
            Layer::Relu(_) | Layer::MaxPool(_) | Layer::AvgPool(_) | Layer::GlobalAvgPool(_) => {}
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn push(&mut self, layer: Layer) {
        self.layers.push(layer);
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut layers = self.layers.iter_mut();
        let Some(first) = layers.next() else {
            return Ok(x.clone());
        };
        let mut h = first.forward(x, mode)?;
        for layer in layers {
            h = layer.forward(&h, mode)?;
        }
        Ok(h)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mut g = grad.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g);
        }
        g
    }

    pub fn clear_cache(&mut self) {
        self.layers.iter_mut().for_each(Layer::clear_cache);
    }
}

impl Module for Sequential {
    fn visit_state(&mut self, prefix: &str, v: &mut dyn StateVisitor) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_state(&join(prefix, &i.to_string()), v);
        }
    }
}

/// Glorot-uniform initialisation.
pub(crate) fn glorot_uniform<R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.random_range(-limit..=limit)).collect();
    Tensor::from_shape_vec(shape.to_vec(), data).expect("shape matches length")
}
