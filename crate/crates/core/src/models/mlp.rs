//! SiLU multilayer perceptron denoiser.
//!
//! The network sees each row of `x_t` concatenated with a time embedding of
//! nine values: `t / T` followed by `sin(t f_k)` and `cos(t f_k)` for
//! `f_k = 10000^(-k/4)`, `k = 0..4`. Hidden layers apply SiLU; the output
//! layer is linear and has the data width.

use std::path::Path;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::dense::{from_matrix, to_matrix, Dense, DenseGrad, DenseRecord};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

pub const TIME_EMBED_DIM: usize = 9;

pub fn time_embedding(t: usize, timesteps: usize) -> [f64; TIME_EMBED_DIM] {
    let mut e = [0.0; TIME_EMBED_DIM];
    let tf = t as f64;
    e[0] = tf / timesteps as f64;
    for k in 0..4 {
        let freq = 10000f64.powf(-(k as f64) / 4.0);
        e[1 + k] = (tf * freq).sin();
        e[5 + k] = (tf * freq).cos();
    }
    e
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    data_dim: usize,
    timesteps: usize,
    widths: Vec<usize>,
    layers: Vec<Dense>,
    seed: Option<u64>,
}

/// Activations saved by [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct GradTape {
    /// Input of every layer; entry 0 is the embedded network input.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub output: Tensor,
    /// Post-activation output of each hidden layer, `[batch, width]`.
    pub features: Vec<Tensor>,
    pub tape: GradTape,
}

/// Parameter gradients in layer order, matching [`Mlp::params_mut`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<DenseGrad>,
}

impl ParamGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.slices()).collect()
    }

    pub fn norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Serialized form of an [`Mlp`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub data_dim: usize,
    pub timesteps: usize,
    pub widths: Vec<usize>,
    /// Seed the weights were initialized from, when known.
    pub seed: Option<u64>,
    pub layers: Vec<DenseRecord>,
}

impl Mlp {
    /// Randomly initialized network with hidden `widths`.
    pub fn new(data_dim: usize, timesteps: usize, widths: &[usize], rng: &mut Rng) -> Result<Self> {
        Self::build(data_dim, timesteps, widths, Some(rng.seed()), |i, o| {
            Dense::kaiming(i, o, rng)
        })
    }

    /// Network with every parameter zero.
    pub fn zeros(data_dim: usize, timesteps: usize, widths: &[usize]) -> Result<Self> {
        Self::build(data_dim, timesteps, widths, None, Dense::zeros)
    }

    fn build(
        data_dim: usize,
        timesteps: usize,
        widths: &[usize],
        seed: Option<u64>,
        mut make: impl FnMut(usize, usize) -> Dense,
    ) -> Result<Self> {
        if data_dim == 0 || timesteps == 0 || widths.contains(&0) {
            return Err(Error::config("widths", "dimensions must be positive"));
        }
        let mut layers = Vec::with_capacity(widths.len() + 1);
        let mut fan_in = data_dim + TIME_EMBED_DIM;
        for &w in widths {
            layers.push(make(fan_in, w));
            fan_in = w;
        }
        layers.push(make(fan_in, data_dim));
        Ok(Self {
            data_dim,
            timesteps,
            widths: widths.to_vec(),
            layers,
            seed,
        })
    }

    /// Network from explicit layers. Layer shapes must chain from
    /// `data_dim + 9` inputs to `data_dim` outputs.
    pub fn from_layers(data_dim: usize, timesteps: usize, layers: Vec<Dense>) -> Result<Self> {
        let mut fan_in = data_dim + TIME_EMBED_DIM;
        let mut widths = Vec::new();
        for (i, l) in layers.iter().enumerate() {
            if l.inputs() != fan_in || l.bias.len() != l.outputs() {
                return Err(Error::Format(format!("layer {i} has {} inputs, expected {fan_in}", l.inputs())));
            }
            fan_in = l.outputs();
            if i + 1 < layers.len() {
                widths.push(fan_in);
            }
        }
        if layers.is_empty() || fan_in != data_dim {
            return Err(Error::Format(format!("final layer must output {data_dim} values")));
        }
        Ok(Self {
            data_dim,
            timesteps,
            widths,
            layers,
            seed: None,
        })
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        param_count(self.data_dim, &self.widths)
    }

    /// Weight and bias slices of every layer, in layer order.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Dense::is_finite)
    }

    fn embed(&self, x_t: &Tensor, ts: &[usize]) -> Result<Array2<f64>> {
        let rows = x_t.rows();
        if x_t.ndim() != 2 || x_t.row_len() != self.data_dim || ts.len() != rows {
            return Err(Error::ShapeMismatch {
                expected: vec![ts.len(), self.data_dim],
                actual: x_t.shape().to_vec(),
            });
        }
        let width = self.data_dim + TIME_EMBED_DIM;
        let mut input = Array2::zeros((rows, width));
        for (i, &t) in ts.iter().enumerate() {
            if t == 0 || t > self.timesteps {
                return Err(Error::TimestepOutOfRange {
                    t,
                    steps: self.timesteps,
                });
            }
            let mut row = input.row_mut(i);
            for (j, &v) in x_t.row(i).iter().enumerate() {
                row[j] = v;
            }
            for (j, v) in time_embedding(t, self.timesteps).into_iter().enumerate() {
                row[self.data_dim + j] = v;
            }
        }
        Ok(input)
    }

    /// Noise prediction for `x_t` (`[batch, data_dim]`) with a timestep per
    /// row, keeping everything needed for [`Mlp::backward`].
    pub fn forward(&self, x_t: &Tensor, ts: &[usize]) -> Result<Forward> {
        let mut h = self.embed(x_t, ts)?;
        let hidden = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(hidden);
        let mut features = Vec::with_capacity(hidden);
        for layer in &self.layers[..hidden] {
            let z = layer.forward(&h);
            let a = z.mapv(silu);
            inputs.push(h);
            features.push(from_matrix(a.clone()));
            pre.push(z);
            h = a;
        }
        let out = self.layers[hidden].forward(&h);
        inputs.push(h);
        Ok(Forward {
            output: from_matrix(out),
            features,
            tape: GradTape { inputs, pre },
        })
    }

    /// Forward pass with one shared timestep.
    pub fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        let ts = vec![t; x_t.rows()];
        Ok(self.forward(x_t, &ts)?.output)
    }

    /// Reverse-mode pass. `d_output` is the loss gradient with respect to the
    /// network output; `feature_grad` optionally injects a gradient on the
    /// output of hidden layer `index`.
    pub fn backward(
        &self,
        tape: &GradTape,
        d_output: &Tensor,
        feature_grad: Option<(usize, &Tensor)>,
    ) -> Result<ParamGrads> {
        let rows = tape.inputs[0].nrows();
        if d_output.shape() != [rows, self.data_dim] {
            return Err(Error::ShapeMismatch {
                expected: vec![rows, self.data_dim],
                actual: d_output.shape().to_vec(),
            });
        }
        let feature_grad = match feature_grad {
            Some((idx, g)) => {
                let width = *self.widths.get(idx).ok_or_else(|| {
                    Error::config("feature_layer", format!("no hidden layer {idx}"))
                })?;
                if g.shape() != [rows, width] {
                    return Err(Error::ShapeMismatch {
                        expected: vec![rows, width],
                        actual: g.shape().to_vec(),
                    });
                }
                Some((idx, to_matrix(g)?))
            }
            None => None,
        };

        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = to_matrix(d_output)?;
        for l in (0..self.layers.len()).rev() {
            let (dx, grad) = self.layers[l].backward(&tape.inputs[l], &g);
            grads.push(grad);
            if l == 0 {
                break;
            }
            let mut dh = dx;
            if let Some((idx, fg)) = &feature_grad {
                if *idx == l - 1 {
                    dh += fg;
                }
            }
            Zip::from(&mut dh)
                .and(&tape.pre[l - 1])
                .for_each(|d, &z| *d *= silu_prime(z));
            g = dh;
        }
        grads.reverse();
        Ok(ParamGrads { layers: grads })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            data_dim: self.data_dim,
            timesteps: self.timesteps,
            widths: self.widths.clone(),
            seed: self.seed,
            layers: self.layers.iter().map(DenseRecord::from).collect(),
        }
    }

    pub fn from_checkpoint(c: Checkpoint) -> Result<Self> {
        let layers = c
            .layers
            .into_iter()
            .map(Dense::try_from)
            .collect::<Result<Vec<_>>>()?;
        let mut m = Self::from_layers(c.data_dim, c.timesteps, layers)?;
        if m.widths != c.widths {
            return Err(Error::Format(format!(
                "checkpoint widths {:?} do not match layers {:?}",
                c.widths, m.widths
            )));
        }
        m.seed = c.seed;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, &self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::from_checkpoint(serde_json::from_reader(file)?)
    }
}

/// Parameter count of an [`Mlp`] with the given shape.
pub fn param_count(data_dim: usize, widths: &[usize]) -> usize {
    let mut fan_in = data_dim + TIME_EMBED_DIM;
    let mut total = 0;
    for &w in widths.iter().chain(std::iter::once(&data_dim)) {
        total += fan_in * w + w;
        fan_in = w;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Straight-line re-implementation of the forward pass.
    fn forward_oracle(m: &Mlp, x: &Tensor, ts: &[usize]) -> Vec<f64> {
        let mut out = Vec::new();
        for (i, &t) in ts.iter().enumerate() {
            let mut h: Vec<f64> = x.row(i).to_vec();
            h.extend_from_slice(&time_embedding(t, m.timesteps()));
            let last = m.layers().len() - 1;
            for (l, layer) in m.layers().iter().enumerate() {
                let mut next = Vec::with_capacity(layer.outputs());
                for r in 0..layer.outputs() {
                    let mut acc = layer.bias[r];
                    for (c, hc) in h.iter().enumerate() {
                        acc += layer.weight[[r, c]] * hc;
                    }
                    next.push(if l < last { acc / (1.0 + (-acc).exp()) } else { acc });
                }
                h = next;
            }
            out.extend(h);
        }
        out
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let m = Mlp::zeros(3, 10, &[5, 4]).unwrap();
        let x = Rng::new(0).randn(&[6, 3]).unwrap();
        let out = m.predict(&x, 4).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_single_layer() {
        let mut layer = Dense::zeros(2 + TIME_EMBED_DIM, 2);
        layer.weight[[0, 0]] = 1.0;
        layer.weight[[1, 1]] = 1.0;
        let m = Mlp::from_layers(2, 10, vec![layer]).unwrap();
        let x = Rng::new(1).randn(&[4, 2]).unwrap();
        assert_eq!(m.predict(&x, 7).unwrap(), x);
    }

    #[test]
    fn matches_forward_oracle() {
        let m = Mlp::new(4, 20, &[8, 6, 5], &mut Rng::new(3)).unwrap();
        let x = Rng::new(4).randn(&[5, 4]).unwrap();
        let ts = [1, 5, 9, 13, 20];
        let f = m.forward(&x, &ts).unwrap();
        let oracle = forward_oracle(&m, &x, &ts);
        for (a, b) in f.output.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(f.features.len(), 3);
        assert_eq!(f.features[1].shape(), &[5, 6]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = Mlp::zeros(3, 10, &[4]).unwrap();
        let x = Tensor::zeros(&[2, 4]).unwrap();
        assert!(matches!(m.predict(&x, 1), Err(Error::ShapeMismatch { .. })));
        let x = Tensor::zeros(&[2, 3]).unwrap();
        assert!(matches!(m.predict(&x, 11), Err(Error::TimestepOutOfRange { .. })));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let m = Mlp::new(2, 10, &[4, 4], &mut Rng::new(0)).unwrap();
        let x = Rng::new(1).randn(&[3, 2]).unwrap();
        let f = m.forward(&x, &[1, 2, 3]).unwrap();
        let g = m.backward(&f.tape, &Tensor::zeros(&[3, 2]).unwrap(), None).unwrap();
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn scalar_layer_hand_derived() {
        // One output, linear: y = w . [x, e(t)] + b, loss = y, so
        // dL/dw = [x, e(t)], dL/db = 1.
        let mut layer = Dense::zeros(1 + TIME_EMBED_DIM, 1);
        layer.weight.fill(0.3);
        let m = Mlp::from_layers(1, 5, vec![layer]).unwrap();
        let x = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let f = m.forward(&x, &[3]).unwrap();
        let g = m.backward(&f.tape, &Tensor::full(&[1, 1], 1.0).unwrap(), None).unwrap();
        let mut expect = vec![2.0];
        expect.extend_from_slice(&time_embedding(3, 5));
        assert_eq!(g.layers[0].weight.as_slice().unwrap(), &expect[..]);
        assert_eq!(g.layers[0].bias[0], 1.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        // Loss = <c, output> + <d, feature_1>; linear in the seeds so the
        // analytic gradient is backward(c, d).
        let mut m = Mlp::new(3, 10, &[5, 4, 6], &mut Rng::new(11)).unwrap();
        let mut rng = Rng::new(12);
        let x = rng.randn(&[4, 3]).unwrap();
        let ts = [1, 4, 7, 10];
        let c = rng.randn(&[4, 3]).unwrap();
        let d = rng.randn(&[4, 4]).unwrap();
        let loss = |m: &Mlp| {
            let f = m.forward(&x, &ts).unwrap();
            let a: f64 = f.output.data().iter().zip(c.data()).map(|(p, q)| p * q).sum();
            let b: f64 = f.features[1].data().iter().zip(d.data()).map(|(p, q)| p * q).sum();
            a + b
        };
        let f = m.forward(&x, &ts).unwrap();
        let g = m.backward(&f.tape, &c, Some((1, &d))).unwrap();
        let analytic: Vec<f64> = g.slices().concat();
        let h = 1e-5;
        let mut idx = 0;
        let n_slices = m.params_mut().len();
        for s in 0..n_slices {
            let len = m.params_mut()[s].len();
            for j in 0..len {
                let orig = m.params_mut()[s][j];
                m.params_mut()[s][j] = orig + h;
                let up = loss(&m);
                m.params_mut()[s][j] = orig - h;
                let down = loss(&m);
                m.params_mut()[s][j] = orig;
                let fd = (up - down) / (2.0 * h);
                let a = analytic[idx];
                assert!(
                    (fd - a).abs() <= 1e-5 * fd.abs().max(a.abs()).max(1e-3),
                    "param {s}/{j}: fd {fd} vs {a}"
                );
                idx += 1;
            }
        }
        assert_eq!(idx, m.param_count());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Mlp::new(2, 10, &[3, 3], &mut Rng::new(8)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        assert_eq!(Mlp::load(&path).unwrap(), m);
    }

    #[test]
    fn param_count_formula() {
        let m = Mlp::zeros(2, 10, &[256, 256, 256]).unwrap();
        assert_eq!(m.param_count(), m.layers().iter().map(Dense::param_count).sum::<usize>());
        assert_eq!(param_count(2, &[4, 4]), (11 * 4 + 4) + (4 * 4 + 4) + (4 * 2 + 2));
    }
}
