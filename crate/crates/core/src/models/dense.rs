use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Fully connected layer `y = x W^T + b` with `W` stored as `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    /// Kaiming-uniform weights, `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`,
    /// and zero bias.
    pub fn kaiming(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / inputs as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((outputs, inputs), || {
            (2.0 * rng.uniform() - 1.0) * bound
        });
        Self {
            weight,
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    /// Returns `(d_input, d_weight, d_bias)` for upstream gradient `g`.
    pub fn backward(&self, x: &Array2<f64>, g: &Array2<f64>) -> (Array2<f64>, DenseGrad) {
        let grad = DenseGrad {
            weight: g.t().dot(x),
            bias: g.sum_axis(Axis(0)),
        };
        (g.dot(&self.weight), grad)
    }

    pub fn params_mut(&mut self) -> [&mut [f64]; 2] {
        [
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseGrad {
    pub fn slices(&self) -> [&[f64]; 2] {
        [
            self.weight.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }
}

/// On-disk form of a [`Dense`] layer: row-major flat weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseRecord {
    pub rows: usize,
    pub cols: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl From<&Dense> for DenseRecord {
    fn from(d: &Dense) -> Self {
        Self {
            rows: d.outputs(),
            cols: d.inputs(),
            weight: d.weight.iter().copied().collect(),
            bias: d.bias.to_vec(),
        }
    }
}

impl TryFrom<DenseRecord> for Dense {
    type Error = Error;

    fn try_from(r: DenseRecord) -> Result<Self> {
        if r.bias.len() != r.rows {
            return Err(Error::Format(format!(
                "bias length {} for {} rows",
                r.bias.len(),
                r.rows
            )));
        }
        let weight = Array2::from_shape_vec((r.rows, r.cols), r.weight)
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(Self {
            weight,
            bias: Array1::from_vec(r.bias),
        })
    }
}

/// Views a `[rows, cols]` tensor as an ndarray matrix.
pub(crate) fn to_matrix(t: &Tensor) -> Result<Array2<f64>> {
    if t.ndim() != 2 {
        return Err(Error::ShapeMismatch {
            expected: vec![t.rows(), t.row_len()],
            actual: t.shape().to_vec(),
        });
    }
    Ok(Array2::from_shape_vec((t.shape()[0], t.shape()[1]), t.data().to_vec())
        .expect("shape checked"))
}

pub(crate) fn from_matrix(a: Array2<f64>) -> Tensor {
    let shape = vec![a.nrows(), a.ncols()];
    let data = if a.is_standard_layout() {
        a.into_raw_vec_and_offset().0
    } else {
        a.iter().copied().collect()
    };
    Tensor::new(shape, data).expect("matrix dims are nonzero")
}

/// The feature regressor of FeatKD: maps student features of width
/// `student_dim` to the teacher's `teacher_dim`, row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    pub layer: Dense,
}

impl LinearMap {
    pub fn zeros(teacher_dim: usize, student_dim: usize) -> Self {
        Self {
            layer: Dense::zeros(student_dim, teacher_dim),
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim, dim);
        m.layer.weight.diag_mut().fill(1.0);
        m
    }

    pub fn init(teacher_dim: usize, student_dim: usize, rng: &mut Rng) -> Self {
        Self {
            layer: Dense::kaiming(student_dim, teacher_dim, rng),
        }
    }

    pub fn teacher_dim(&self) -> usize {
        self.layer.outputs()
    }

    pub fn student_dim(&self) -> usize {
        self.layer.inputs()
    }

    fn check(&self, f_s: &Tensor) -> Result<Array2<f64>> {
        let x = to_matrix(f_s)?;
        if x.ncols() != self.student_dim() {
            return Err(Error::ShapeMismatch {
                expected: vec![x.nrows(), self.student_dim()],
                actual: f_s.shape().to_vec(),
            });
        }
        Ok(x)
    }

    pub fn apply(&self, f_s: &Tensor) -> Result<Tensor> {
        let x = self.check(f_s)?;
        Ok(from_matrix(self.layer.forward(&x)))
    }

    /// `(d_f_s, d_weight, d_bias)` for upstream gradient `d_out`.
    pub fn backward(&self, f_s: &Tensor, d_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let x = self.check(f_s)?;
        let g = to_matrix(d_out)?;
        if g.dim() != (x.nrows(), self.teacher_dim()) {
            return Err(Error::ShapeMismatch {
                expected: vec![x.nrows(), self.teacher_dim()],
                actual: d_out.shape().to_vec(),
            });
        }
        let (dx, grad) = self.layer.backward(&x, &g);
        let db = Tensor::vector(grad.bias.to_vec())?;
        Ok((from_matrix(dx), from_matrix(grad.weight), db))
    }

    pub fn params_mut(&mut self) -> [&mut [f64]; 2] {
        self.layer.params_mut()
    }
}
