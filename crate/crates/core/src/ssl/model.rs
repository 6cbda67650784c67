use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    join, Backbone, BackboneKind, BatchNorm, Dense, Layer, Mode, Module, Sequential, StateVisitor, Tensor,
    XceptionConfig, INPUT_SIDE,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub backbone: BackboneKind,
    pub projection_dim: usize,
    /// Only read for the xception backbone.
    #[serde(default)]
    pub xception: XceptionConfig,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::Xception,
            projection_dim: 2048,
            xception: XceptionConfig::default(),
        }
    }
}

impl EncoderSpec {
    pub fn tiny() -> Self {
        Self {
            backbone: BackboneKind::Tiny,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.projection_dim == 0 {
            return Err(Error::validation("projection_dim must be positive"));
        }
        Ok(())
    }

    pub fn build_backbone<R: Rng + ?Sized>(&self, rng: &mut R) -> Backbone {
        match self.backbone {
            BackboneKind::Tiny => Backbone::tiny(rng),
            BackboneKind::Xception => Backbone::xception(self.xception, rng),
        }
    }
}

fn projection_mlp<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Sequential {
    Sequential::new(vec![
        Layer::Dense(Dense::new(input, hidden, rng)),
        Layer::BatchNorm(BatchNorm::new(hidden)),
        Layer::Dense(Dense::new(hidden, output, rng)),
    ])
}

pub(crate) fn check_image_batch(x: &Tensor) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[0] == 0 || s[1..] != [3, INPUT_SIDE, INPUT_SIDE] {
        return Err(Error::validation(format!(
            "expected an [N, 3, {INPUT_SIDE}, {INPUT_SIDE}] batch, got {s:?}"
        )));
    }
    Ok(())
}

/// Backbone, global average pool, then dense / batch-norm / dense projection.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub backbone: Backbone,
    pub head: Sequential,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(spec: EncoderSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let backbone = spec.build_backbone(rng);
        let d = spec.projection_dim;
        let head = projection_mlp(backbone.out_dim, d, d, rng);
        Ok(Self { spec, backbone, head })
    }

    /// `[N, 3, 224, 224]` images to `[N, projection_dim]` projections.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        check_image_batch(x)?;
        let h = self.backbone.forward(x, mode)?;
        self.head.forward(&h, mode)
    }

    /// Backpropagates a projection gradient into every encoder parameter.
    pub fn backward(&mut self, grad: &Tensor) {
        let g = self.head.backward(grad);
        self.backbone.backward(&g);
    }

    pub fn clear_cache(&mut self) {
        self.backbone.clear_cache();
        self.head.clear_cache();
    }
}

impl Module for Encoder {
    fn visit_state(&mut self, prefix: &str, v: &mut dyn StateVisitor) {
        self.backbone.visit_state(&join(prefix, "backbone"), v);
        self.head.visit_state(&join(prefix, "head"), v);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl Default for PredictorSpec {
    fn default() -> Self {
        Self {
            input_dim: 2048,
            hidden_dim: 512,
        }
    }
}

/// Dense / batch-norm / dense bottleneck mapping projections to predictions.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub spec: PredictorSpec,
    pub net: Sequential,
}

impl Predictor {
    pub fn new<R: Rng + ?Sized>(spec: PredictorSpec, rng: &mut R) -> Result<Self> {
        if spec.input_dim == 0 || spec.hidden_dim == 0 {
            return Err(Error::validation("predictor dimensions must be positive"));
        }
        let net = projection_mlp(spec.input_dim, spec.hidden_dim, spec.input_dim, rng);
        Ok(Self { spec, net })
    }

    pub fn forward(&mut self, z: &Tensor, mode: Mode) -> Result<Tensor> {
        if z.ndim() != 2 || z.shape()[1] != self.spec.input_dim {
            return Err(Error::validation(format!(
                "predictor expects [N, {}], got {:?}",
                self.spec.input_dim,
                z.shape()
            )));
        }
        self.net.forward(z, mode)
    }

    /// Returns the gradient with respect to the predictor input.
    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        self.net.backward(grad)
    }

    pub fn clear_cache(&mut self) {
        self.net.clear_cache();
    }
}

impl Module for Predictor {
    fn visit_state(&mut self, prefix: &str, v: &mut dyn StateVisitor) {
        self.net.visit_state(&join(prefix, "net"), v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;
    use ndarray::{Array2, Ix2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    fn dense_mut(layer: &mut Layer) -> &mut Dense {
        match layer {
            Layer::Dense(d) => d,
            _ => panic!("not dense"),
        }
    }

    fn as2(t: &Tensor) -> Array2<f32> {
        t.clone().into_dimensionality::<Ix2>().unwrap()
    }

    #[test]
    fn tiny_encoder_output_shape_and_determinism() {
        let spec = EncoderSpec {
            projection_dim: 64,
            ..EncoderSpec::tiny()
        };
        let mut enc = Encoder::new(spec, &mut rng()).unwrap();
        let x = Tensor::from_shape_fn(vec![2, 3, 224, 224], |d| ((d[2] * 7 + d[3] * 3 + d[1]) % 13) as f32 / 13.0);
        let a = enc.forward(&x, Mode::Infer).unwrap();
        let b = enc.forward(&x, Mode::Infer).unwrap();
        assert_eq!(a.shape(), &[2, 64]);
        assert_eq!(a, b);
        assert!(matches!(
            enc.forward(&Tensor::zeros(vec![1, 3, 100, 100]), Mode::Infer),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn default_projection_is_2048() {
        let mut enc = Encoder::new(EncoderSpec::tiny(), &mut rng()).unwrap();
        let out = enc.forward(&Tensor::zeros(vec![1, 3, 224, 224]), Mode::Infer).unwrap();
        assert_eq!(out.shape(), &[1, 2048]);
    }

    /// Every convolution keeps only its centre tap, routing output channel `o`
    /// from input channel `o % cin`, so a constant image stays constant per
    /// channel all the way to the pooled features.
    #[test]
    fn hand_evaluated_tiny_forward() {
        struct Route;
        impl StateVisitor for Route {
            fn param(&mut self, name: &str, p: &mut Param) {
                if name.contains("features") && name.ends_with("weight") {
                    let (cout, cin) = (p.value.shape()[0], p.value.shape()[1]);
                    p.value.fill(0.0);
                    for o in 0..cout {
                        p.value[[o, o % cin, 1, 1]] = 1.0;
                    }
                } else if name.contains("features") {
                    p.value.fill(0.0);
                }
            }
        }
        let spec = EncoderSpec {
            projection_dim: 4,
            ..EncoderSpec::tiny()
        };
        let mut enc = Encoder::new(spec, &mut rng()).unwrap();
        enc.backbone.visit_state("", &mut Route);
        let w1 = Tensor::from_shape_fn(vec![32, 4], |d| ((d[0] + 2 * d[1]) % 5) as f32 * 0.1 - 0.2);
        let b1 = Tensor::from_shape_vec(vec![4], vec![0.1, -0.1, 0.0, 0.3]).unwrap();
        let w2 = Tensor::from_shape_fn(vec![4, 4], |d| if d[0] == d[1] { 2.0 } else { 0.5 });
        let b2 = Tensor::zeros(vec![4]);
        *dense_mut(&mut enc.head.layers[0]) = Dense::from_weights(w1.clone(), b1.clone());
        *dense_mut(&mut enc.head.layers[2]) = Dense::from_weights(w2.clone(), b2);

        let rgb = [0.2f32, 0.5, 0.8];
        let x = Tensor::from_shape_fn(vec![1, 3, 224, 224], |d| rgb[d[1]]);
        let out = enc.forward(&x, Mode::Infer).unwrap();

        // Pooled feature o equals the input channel reached through the routes 32->16->8->3.
        let feat: Vec<f64> = (0..32).map(|o| rgb[(o % 16) % 8 % 3] as f64).collect();
        let hidden: Vec<f64> = (0..4)
            .map(|j| {
                let pre: f64 = (0..32).map(|i| feat[i] * w1[[i, j]] as f64).sum::<f64>() + b1[[j]] as f64;
                pre / (1.0 + 1e-3f64).sqrt()
            })
            .collect();
        for k in 0..4 {
            let expect: f64 = (0..4).map(|j| hidden[j] * w2[[j, k]] as f64).sum();
            assert!((out[[0, k]] as f64 - expect).abs() < 1e-5, "{k}: {} vs {expect}", out[[0, k]]);
        }
    }

    #[test]
    fn identity_predictor_passes_input_through() {
        let spec = PredictorSpec {
            input_dim: 6,
            hidden_dim: 6,
        };
        let mut pred = Predictor::new(spec, &mut rng()).unwrap();
        let eye = Tensor::from_shape_fn(vec![6, 6], |d| (d[0] == d[1]) as u8 as f32);
        *dense_mut(&mut pred.net.layers[0]) = Dense::from_weights(eye.clone(), Tensor::zeros(vec![6]));
        *dense_mut(&mut pred.net.layers[2]) = Dense::from_weights(eye, Tensor::zeros(vec![6]));
        if let Layer::BatchNorm(bn) = &mut pred.net.layers[1] {
            bn.running_var.fill(1.0 - bn.eps);
        }
        let z = Tensor::from_shape_fn(vec![3, 6], |d| (d[0] as f32 - 1.0) * 0.7 + d[1] as f32 * 0.1);
        let p = pred.forward(&z, Mode::Infer).unwrap();
        for (a, b) in p.iter().zip(z.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn predictor_matches_matrix_oracle() {
        let spec = PredictorSpec {
            input_dim: 8,
            hidden_dim: 3,
        };
        let mut pred = Predictor::new(spec, &mut rng()).unwrap();
        if let Layer::BatchNorm(bn) = &mut pred.net.layers[1] {
            bn.running_mean = Tensor::from_shape_vec(vec![3], vec![0.1, -0.2, 0.05]).unwrap();
            bn.running_var = Tensor::from_shape_vec(vec![3], vec![0.5, 2.0, 1.5]).unwrap();
            bn.gamma.value = Tensor::from_shape_vec(vec![3], vec![1.2, 0.8, -0.5]).unwrap();
            bn.beta.value = Tensor::from_shape_vec(vec![3], vec![0.0, 0.3, -0.1]).unwrap();
        }
        let z = Tensor::from_shape_fn(vec![2, 8], |d| ((d[0] * 8 + d[1]) as f32 * 0.37).sin());
        let p = as2(&pred.forward(&z, Mode::Infer).unwrap());

        let w1 = as2(&dense_mut(&mut pred.net.layers[0]).weight.value);
        let b1 = dense_mut(&mut pred.net.layers[0]).bias.value.clone();
        let w2 = as2(&dense_mut(&mut pred.net.layers[2]).weight.value);
        let b2 = dense_mut(&mut pred.net.layers[2]).bias.value.clone();
        let (mean, var, gamma, beta) = ([0.1, -0.2, 0.05], [0.5, 2.0, 1.5], [1.2, 0.8, -0.5], [0.0, 0.3, -0.1]);
        for n in 0..2 {
            let h: Vec<f64> = (0..3)
                .map(|j| {
                    let pre: f64 = (0..8).map(|i| z[[n, i]] as f64 * w1[[i, j]] as f64).sum::<f64>() + b1[[j]] as f64;
                    gamma[j] * (pre - mean[j]) / (var[j] + 1e-3f64).sqrt() + beta[j]
                })
                .collect();
            for k in 0..8 {
                let expect: f64 = (0..3).map(|j| h[j] * w2[[j, k]] as f64).sum::<f64>() + b2[[k]] as f64;
                assert!((p[[n, k]] as f64 - expect).abs() < 1e-5);
            }
        }
        assert!(pred.forward(&Tensor::zeros(vec![1, 7]), Mode::Infer).is_err());
    }
}
