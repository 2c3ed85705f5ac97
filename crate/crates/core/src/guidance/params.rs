//! Dense layers and the full parameter set of the guidance network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative given the pre-activation `x` and the output `y`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GnnConfig {
    /// Encoder dimension.
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub activation: Activation,
}

impl Default for GnnConfig {
    fn default() -> Self {
        Self {
            input_dim: 1024,
            hidden_dim: 512,
            layers: 6,
            activation: Activation::Relu,
        }
    }
}

/// `y = W x + b` with `W` stored row-major as `out x inp`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub inp: usize,
    pub out: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Linear {
    pub fn zeros(inp: usize, out: usize) -> Self {
        Self {
            inp,
            out,
            w: vec![0.0; inp * out],
            b: vec![0.0; out],
        }
    }

    /// Uniform in `±1/sqrt(inp)` for weights and biases.
    pub fn uniform(inp: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        let mut l = Self::zeros(inp, out);
        l.w.iter_mut().for_each(|x| *x = rng.gen_range(-bound..bound));
        l.b.iter_mut().for_each(|x| *x = rng.gen_range(-bound..bound));
        l
    }

    pub fn forward(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.inp);
        debug_assert_eq!(y.len(), self.out);
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &self.w[o * self.inp..(o + 1) * self.inp];
            *yo = self.b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// Accumulates parameter gradients into `grad` and adds `W^T dy` into `dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Linear, dx: Option<&mut [f64]>) {
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.b[o] += g;
            let grow = &mut grad.w[o * self.inp..(o + 1) * self.inp];
            for (gw, xi) in grow.iter_mut().zip(x) {
                *gw += g * xi;
            }
        }
        if let Some(dx) = dx {
            for (o, &g) in dy.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let row = &self.w[o * self.inp..(o + 1) * self.inp];
                for (d, wi) in dx.iter_mut().zip(row) {
                    *d += g * wi;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// Two-layer relation transform applied before the DistMult product.
    pub message_in: Linear,
    pub message_out: Linear,
    /// Maps `[h; agg]` to the next state.
    pub update: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GnnParams {
    pub config: GnnConfig,
    pub triple_proj: Linear,
    pub relation_proj: Linear,
    pub layers: Vec<LayerParams>,
    pub readout: Linear,
}

impl GnnParams {
    pub fn init(config: GnnConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dp, dg) = (config.input_dim, config.hidden_dim);
        let triple_proj = Linear::uniform(3 * dp, dg, &mut rng);
        let relation_proj = Linear::uniform(dp, dg, &mut rng);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                message_in: Linear::uniform(dg, dg, &mut rng),
                message_out: Linear::uniform(dg, dg, &mut rng),
                update: Linear::uniform(2 * dg, dg, &mut rng),
            })
            .collect();
        let readout = Linear::uniform(dg, 1, &mut rng);
        Self {
            config,
            triple_proj,
            relation_proj,
            layers,
            readout,
        }
    }

    pub fn zeros(config: GnnConfig) -> Self {
        let (dp, dg) = (config.input_dim, config.hidden_dim);
        Self {
            config,
            triple_proj: Linear::zeros(3 * dp, dg),
            relation_proj: Linear::zeros(dp, dg),
            layers: (0..config.layers)
                .map(|_| LayerParams {
                    message_in: Linear::zeros(dg, dg),
                    message_out: Linear::zeros(dg, dg),
                    update: Linear::zeros(2 * dg, dg),
                })
                .collect(),
            readout: Linear::zeros(dg, 1),
        }
    }

    fn linears(&self) -> Vec<(String, &Linear)> {
        let mut out = vec![
            ("triple_proj".to_string(), &self.triple_proj),
            ("relation_proj".to_string(), &self.relation_proj),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.message_in"), &layer.message_in));
            out.push((format!("layers.{l}.message_out"), &layer.message_out));
            out.push((format!("layers.{l}.update"), &layer.update));
        }
        out.push(("readout".to_string(), &self.readout));
        out
    }

    fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut out = vec![&mut self.triple_proj, &mut self.relation_proj];
        for layer in &mut self.layers {
            out.push(&mut layer.message_in);
            out.push(&mut layer.message_out);
            out.push(&mut layer.update);
        }
        out.push(&mut self.readout);
        out
    }

    /// Named tensors with shapes, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (name, lin) in self.linears() {
            out.push((format!("{name}.weight"), vec![lin.out, lin.inp], lin.w.as_slice()));
            out.push((format!("{name}.bias"), vec![lin.out], lin.b.as_slice()));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for lin in self.linears_mut() {
            out.push(&mut lin.w);
            out.push(&mut lin.b);
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, _, d)| d.len()).sum()
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &GnnParams) {
        let src: Vec<Vec<f64>> = other.tensors().into_iter().map(|(_, _, d)| d.to_vec()).collect();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            for (a, b) in dst.iter_mut().zip(s) {
                *a += alpha * b;
            }
        }
    }

    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }
}
