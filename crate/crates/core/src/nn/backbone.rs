//! Convolutional feature extractors shared by the encoder and the classifier.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::*;
use super::{Layer, Mode, Module, Sequential, StateVisitor, Tensor};
use crate::error::{Error, Result};

/// Side length of the square network input.
pub const INPUT_SIDE: usize = 224;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Xception,
    /// Three convolution blocks; small enough to train on a laptop CPU.
    Tiny,
}

impl std::str::FromStr for BackboneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xception" => Ok(Self::Xception),
            "tiny" => Ok(Self::Tiny),
            other => Err(Error::validation(format!("unknown backbone {other:?}"))),
        }
    }
}

/// Scaled-down Xception variants for tests; the default is the full network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XceptionConfig {
    pub width_divisor: usize,
    pub middle_blocks: usize,
}

impl Default for XceptionConfig {
    fn default() -> Self {
        Self {
            width_divisor: 1,
            middle_blocks: 8,
        }
    }
}

/// Feature body ending at the final convolution activation, plus the global pool.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub features: Sequential,
    pub pool: GlobalAvgPool,
    /// When false the body already emits `[N, features]` (toy linear encoders).
    pub pooled: bool,
    pub out_dim: usize,
}

fn relu() -> Layer {
    Layer::Relu(Relu::default())
}

fn bn(c: usize) -> Layer {
    Layer::BatchNorm(BatchNorm::new(c))
}

fn sep<R: Rng + ?Sized>(cin: usize, cout: usize, rng: &mut R) -> [Layer; 2] {
    [
        Layer::Depthwise(DepthwiseConv2d::new(cin, 3, rng)),
        Layer::Conv2d(Conv2d::new(cin, cout, 1, 1, 0, rng)),
    ]
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(kind: BackboneKind, rng: &mut R) -> Self {
        match kind {
            BackboneKind::Tiny => Self::tiny(rng),
            BackboneKind::Xception => Self::xception(XceptionConfig::default(), rng),
        }
    }

    /// 4x mean-pool downsample, then conv(8)/pool, conv(16)/pool, conv(32).
    pub fn tiny<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let widths = [3usize, 8, 16, 32];
        let mut layers = vec![Layer::AvgPool(AvgPool2d::new(4))];
        for (i, pair) in widths.windows(2).enumerate() {
            layers.push(Layer::Conv2d(Conv2d::new(pair[0], pair[1], 3, 1, 1, rng)));
            layers.push(relu());
            if i + 2 < widths.len() {
                layers.push(Layer::MaxPool(MaxPool2d::new(2, 2, Padding::Valid)));
            }
        }
        Self::custom(Sequential::new(layers), true, widths[3])
    }

    pub fn xception<R: Rng + ?Sized>(cfg: XceptionConfig, rng: &mut R) -> Self {
        let c = |n: usize| (n / cfg.width_divisor.max(1)).max(2);
        let mut layers = vec![
            Layer::Conv2d(Conv2d::new(3, c(32), 3, 2, 0, rng)),
            bn(c(32)),
            relu(),
            Layer::Conv2d(Conv2d::new(c(32), c(64), 3, 1, 0, rng)),
            bn(c(64)),
            relu(),
        ];
        let mut cin = c(64);
        for (i, cout) in [c(128), c(256), c(728)].into_iter().enumerate() {
            let mut main = Vec::new();
            if i > 0 {
                main.push(relu());
            }
            main.extend(sep(cin, cout, rng));
            main.extend([bn(cout), relu()]);
            main.extend(sep(cout, cout, rng));
            main.extend([bn(cout), Layer::MaxPool(MaxPool2d::new(3, 2, Padding::Same))]);
            let skip = Sequential::new(vec![Layer::Conv2d(Conv2d::new(cin, cout, 1, 2, 0, rng)), bn(cout)]);
            layers.push(Layer::Residual(Box::new(Residual {
                main: Sequential::new(main),
                skip: Some(skip),
            })));
            cin = cout;
        }
        for _ in 0..cfg.middle_blocks {
            let mut main = Vec::new();
            for _ in 0..3 {
                main.push(relu());
                main.extend(sep(cin, cin, rng));
                main.push(bn(cin));
            }
            layers.push(Layer::Residual(Box::new(Residual {
                main: Sequential::new(main),
                skip: None,
            })));
        }
        let (c728, c1024) = (c(728), c(1024));
        let mut main = vec![relu()];
        main.extend(sep(cin, c728, rng));
        main.extend([bn(c728), relu()]);
        main.extend(sep(c728, c1024, rng));
        main.extend([bn(c1024), Layer::MaxPool(MaxPool2d::new(3, 2, Padding::Same))]);
        layers.push(Layer::Residual(Box::new(Residual {
            main: Sequential::new(main),
            skip: Some(Sequential::new(vec![
                Layer::Conv2d(Conv2d::new(cin, c1024, 1, 2, 0, rng)),
                bn(c1024),
            ])),
        })));
        let (c1536, c2048) = (c(1536), c(2048));
        layers.extend(sep(c1024, c1536, rng));
        layers.extend([bn(c1536), relu()]);
        layers.extend(sep(c1536, c2048, rng));
        layers.extend([bn(c2048), relu()]);
        Self::custom(Sequential::new(layers), true, c2048)
    }

    pub fn custom(features: Sequential, pooled: bool, out_dim: usize) -> Self {
        Self {
            features,
            pool: GlobalAvgPool::default(),
            pooled,
            out_dim,
        }
    }

    /// Final convolution maps `[N, C, h, w]` (or dense features when unpooled).
    pub fn feature_maps(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.features.forward(x, mode)
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let maps = self.features.forward(x, mode)?;
        if self.pooled {
            self.pool.forward(&maps)
        } else {
            Ok(maps)
        }
    }

    /// Backpropagates a gradient on the pooled features; returns the input gradient.
    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let g = if self.pooled {
            self.pool.backward(grad)
        } else {
            grad.clone()
        };
        self.features.backward(&g)
    }

    pub fn clear_cache(&mut self) {
        self.features.clear_cache();
    }
}

impl Module for Backbone {
    fn visit_state(&mut self, prefix: &str, v: &mut dyn StateVisitor) {
        self.features.visit_state(&super::join(prefix, "features"), v);
    }
}

/// Stacks `H x W x 3` rasters into an `[N, 3, H, W]` batch.
pub fn images_to_batch(images: &[&Array3<f32>]) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::validation("empty batch"));
    };
    let (h, w, c) = first.dim();
    let mut out = Tensor::zeros(vec![images.len(), c, h, w]);
    let os = out.as_slice_mut().unwrap();
    for (i, img) in images.iter().enumerate() {
        if img.dim() != (h, w, c) {
            return Err(Error::validation(format!(
                "batch mixes shapes {:?} and {:?}",
                (h, w, c),
                img.dim()
            )));
        }
        for ((y, x, ch), v) in img.indexed_iter() {
            os[((i * c + ch) * h + y) * w + x] = *v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tiny_output_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Backbone::tiny(&mut rng);
        let x = Tensor::zeros(vec![2, 3, INPUT_SIDE, INPUT_SIDE]);
        assert_eq!(b.forward(&x, Mode::Infer).unwrap().shape(), &[2, 32]);
        assert_eq!(b.feature_maps(&x, Mode::Infer).unwrap().shape(), &[2, 32, 14, 14]);
    }

    #[test]
    fn narrow_xception_trains_end_to_end() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = XceptionConfig {
            width_divisor: 32,
            middle_blocks: 1,
        };
        let mut b = Backbone::xception(cfg, &mut rng);
        let x = Tensor::from_shape_fn(vec![2, 3, INPUT_SIDE, INPUT_SIDE], |i| ((i[2] * 7 + i[3]) % 11) as f32 / 11.0);
        let maps = b.feature_maps(&x, Mode::Train).unwrap();
        assert_eq!(&maps.shape()[2..], &[7, 7]);
        let y = b.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.shape(), &[2, 64]);
        let dx = b.backward(&Tensor::ones(vec![2, 64]));
        assert_eq!(dx.shape(), x.shape());
    }

    #[test]
    fn full_xception_projects_to_2048() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut b = Backbone::xception(XceptionConfig::default(), &mut rng);
        let x = Tensor::from_elem(vec![1, 3, INPUT_SIDE, INPUT_SIDE], 0.5);
        assert_eq!(b.forward(&x, Mode::Infer).unwrap().shape(), &[1, 2048]);
    }

    #[test]
    fn batch_layout_is_nchw() {
        let a = Array3::from_shape_fn((2, 3, 3), |(y, x, c)| (y * 100 + x * 10 + c) as f32);
        let t = images_to_batch(&[&a, &a]).unwrap();
        assert_eq!(t.shape(), &[2, 3, 2, 3]);
        assert_eq!(t[[1, 2, 1, 0]], 102.0);
    }
}
