use super::{Module, Param, StateVisitor, Tensor};

/// Stochastic gradient descent with heavy-ball momentum:
/// `v <- momentum * v + g`, `w <- w - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut dyn Module) {
        struct Step<'a> {
            opt: &'a mut Sgd,
            idx: usize,
        }
        impl StateVisitor for Step<'_> {
            fn param(&mut self, _: &str, p: &mut Param) {
                let (lr, mom) = (self.opt.lr, self.opt.momentum);
                if self.opt.velocity.len() <= self.idx {
                    self.opt.velocity.push(Tensor::zeros(p.value.raw_dim()));
                }
                let v = &mut self.opt.velocity[self.idx];
                ndarray::Zip::from(&mut p.value)
                    .and(v)
                    .and(&p.grad)
                    .for_each(|w, v, &g| {
                        *v = mom * *v + g;
                        *w -= lr * *v;
                    });
                self.idx += 1;
            }
        }
        model.visit_state("", &mut Step { opt: self, idx: 0 });
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut dyn Module) {
        self.t += 1;
        struct Step<'a> {
            opt: &'a mut Adam,
            idx: usize,
            lr_t: f32,
        }
        impl StateVisitor for Step<'_> {
            fn param(&mut self, _: &str, p: &mut Param) {
                let (b1, b2, eps, lr_t) = (self.opt.beta1, self.opt.beta2, self.opt.eps, self.lr_t);
                if self.opt.m.len() <= self.idx {
                    self.opt.m.push(Tensor::zeros(p.value.raw_dim()));
                    self.opt.v.push(Tensor::zeros(p.value.raw_dim()));
                }
                let (m, v) = (&mut self.opt.m[self.idx], &mut self.opt.v[self.idx]);
                ndarray::Zip::from(&mut p.value)
                    .and(m)
                    .and(v)
                    .and(&p.grad)
                    .for_each(|w, m, v, &g| {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *w -= lr_t * *m / (v.sqrt() + eps);
                    });
                self.idx += 1;
            }
        }
        let t = self.t;
        let lr_t = self.lr * (1.0 - self.beta2.powi(t)).sqrt() / (1.0 - self.beta1.powi(t));
        model.visit_state("", &mut Step { opt: self, idx: 0, lr_t });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Dense, Layer};

    fn quadratic_layer() -> Layer {
        Layer::Dense(Dense::from_weights(
            Tensor::from_elem(vec![1, 1], 3.0),
            Tensor::zeros(vec![1]),
        ))
    }

    fn set_grad_to_weight(l: &mut Layer) {
        // gradient of 0.5 * w^2
        if let Layer::Dense(d) = l {
            d.weight.grad = d.weight.value.clone();
            d.bias.grad.fill(0.0);
        }
    }

    fn weight(l: &Layer) -> f32 {
        match l {
            Layer::Dense(d) => d.weight.value[[0, 0]],
            _ => unreachable!(),
        }
    }

    #[test]
    fn sgd_momentum_matches_hand_recurrence() {
        let mut l = quadratic_layer();
        let mut opt = Sgd::new(0.1, 0.6);
        let (mut w, mut v) = (3.0f32, 0.0f32);
        for _ in 0..5 {
            set_grad_to_weight(&mut l);
            opt.step(&mut l);
            v = 0.6 * v + w;
            w -= 0.1 * v;
            assert!((weight(&l) - w).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_learning_rate_is_a_null_update() {
        let mut l = quadratic_layer();
        let before = weight(&l).to_bits();
        let mut opt = Sgd::new(0.0, 0.6);
        set_grad_to_weight(&mut l);
        opt.step(&mut l);
        assert_eq!(weight(&l).to_bits(), before);
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut l = quadratic_layer();
        let mut opt = Adam::new(0.1);
        for _ in 0..200 {
            set_grad_to_weight(&mut l);
            opt.step(&mut l);
        }
        assert!(weight(&l).abs() < 0.05);
    }
}
