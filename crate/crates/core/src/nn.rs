//! Dense layers shared by the deformation network and the color decoder.

use rand::Rng;

use crate::diffkernel::{Array, KernelError, Tape, Var};

/// `y = x W + b` with `W` stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Array,
    pub bias: Array,
}

impl Linear {
    /// Uniform `U(-1/sqrt(in), 1/sqrt(in))` for weights and bias.
    pub fn uniform<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight = (0..inputs * outputs).map(|_| rng.random_range(-bound..bound)).collect();
        let bias = (0..outputs).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            weight: Array::new(vec![inputs, outputs], weight).expect("linear weight shape"),
            bias: Array::new(vec![1, outputs], bias).expect("linear bias shape"),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array::zeros(&[inputs, outputs]),
            bias: Array::zeros(&[1, outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Plain evaluation of `[n, in]` rows.
    pub fn apply(&self, x: &[f64], n: usize) -> Vec<f64> {
        let (k, m) = (self.inputs(), self.outputs());
        debug_assert_eq!(x.len(), n * k);
        let mut y: Vec<f64> = (0..n).flat_map(|_| self.bias.data().iter().copied()).collect();
        let w = self.weight.data();
        for (row, out) in x.chunks_exact(k).zip(y.chunks_exact_mut(m)) {
            for (xi, wrow) in row.iter().zip(w.chunks_exact(m)) {
                if *xi == 0.0 {
                    continue;
                }
                for (o, wv) in out.iter_mut().zip(wrow) {
                    *o += xi * wv;
                }
            }
        }
        y
    }
}

/// Tape handles of one bound [`Linear`].
#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    pub fn bind(tape: &mut Tape, layer: &Linear, trainable: bool) -> Self {
        let (w, b) = (layer.weight.clone(), layer.bias.clone());
        if trainable {
            Self {
                weight: tape.param(w),
                bias: tape.param(b),
            }
        } else {
            Self {
                weight: tape.constant(w),
                bias: tape.constant(b),
            }
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, KernelError> {
        let y = tape.matmul(x, self.weight)?;
        tape.add(y, self.bias)
    }
}

pub(crate) fn relu_in_place(v: &mut [f64]) {
    for x in v {
        *x = x.max(0.0);
    }
}
