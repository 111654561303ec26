//! Deformation field: sinusoidal encodings of position and time feeding an
//! MLP that predicts per-point offsets.

use rand::Rng;

use crate::diffkernel::{Array, KernelError, Tape, Var};
use crate::error::Result;
use crate::nn::{relu_in_place, Linear, LinearVars};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FreqEncoding {
    pub levels: usize,
    pub include_input: bool,
}

impl FreqEncoding {
    pub const POSITION: Self = Self { levels: 10, include_input: true };
    pub const TIME: Self = Self { levels: 6, include_input: false };

    pub fn output_dim(&self, input_dim: usize) -> usize {
        input_dim * 2 * self.levels + if self.include_input { input_dim } else { 0 }
    }

    /// Appends the encoding of `x`: the raw input if requested, then for each
    /// `k` the sines of all components followed by their cosines.
    pub fn encode_into(&self, x: &[f64], out: &mut Vec<f64>) {
        if self.include_input {
            out.extend_from_slice(x);
        }
        let mut freq = std::f64::consts::PI;
        for _ in 0..self.levels {
            out.extend(x.iter().map(|v| (freq * v).sin()));
            out.extend(x.iter().map(|v| (freq * v).cos()));
            freq *= 2.0;
        }
    }
}

pub fn freq_encode(x: &[f64], enc: &FreqEncoding) -> Vec<f64> {
    let mut out = Vec::with_capacity(enc.output_dim(x.len()));
    enc.encode_into(x, &mut out);
    out
}

/// Per-point offsets predicted by the deformation network.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformOffsets {
    /// `[N, 3]`
    pub d_mu: Array,
    /// `[N, 4]`
    pub d_rot: Array,
    /// `[N, 3]`
    pub d_scale: Array,
    /// `[N, 3]`
    pub d_color: Array,
}

impl DeformOffsets {
    pub fn zeros(n: usize) -> Self {
        Self {
            d_mu: Array::zeros(&[n, 3]),
            d_rot: Array::zeros(&[n, 4]),
            d_scale: Array::zeros(&[n, 3]),
            d_color: Array::zeros(&[n, 3]),
        }
    }

    pub fn len(&self) -> usize {
        self.d_mu.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.d_mu.is_finite() && self.d_rot.is_finite() && self.d_scale.is_finite() && self.d_color.is_finite()
    }
}

pub const HEAD_DIMS: [usize; 4] = [3, 4, 3, 3];

/// MLP `F(gamma(mu), gamma(t)) -> (d_mu, d_rot, d_scale, d_color)`.
///
/// The encoded input is concatenated again onto the output of hidden layer
/// `skip`, so layer `skip + 1` sees `width + input_dim` features.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformNet {
    pub pos_enc: FreqEncoding,
    pub time_enc: FreqEncoding,
    pub hidden: Vec<Linear>,
    pub skip: usize,
    pub heads: [Linear; 4],
}

impl DeformNet {
    pub const DEPTH: usize = 8;
    pub const WIDTH: usize = 256;
    pub const SKIP: usize = 4;

    /// The 8x256 network with zero-initialized heads.
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::with_shape(Self::DEPTH, Self::WIDTH, Self::SKIP, rng)
    }

    pub fn with_shape<R: Rng + ?Sized>(depth: usize, width: usize, skip: usize, rng: &mut R) -> Self {
        let pos_enc = FreqEncoding::POSITION;
        let time_enc = FreqEncoding::TIME;
        let input_dim = pos_enc.output_dim(3) + time_enc.output_dim(1);
        let mut hidden = Vec::with_capacity(depth);
        for l in 0..depth {
            let fan_in = if l == 0 {
                input_dim
            } else if l == skip + 1 {
                width + input_dim
            } else {
                width
            };
            hidden.push(Linear::uniform(fan_in, width, rng));
        }
        // A skip after the last hidden layer widens the head input instead.
        let head_in = if skip + 1 == depth { width + input_dim } else { width };
        let heads = HEAD_DIMS.map(|d| Linear::zeros(head_in, d));
        Self {
            pos_enc,
            time_enc,
            hidden,
            skip,
            heads,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.pos_enc.output_dim(3) + self.time_enc.output_dim(1)
    }

    /// `[N, input_dim]` network input rows for positions `mu` `[N, 3]` at `t`.
    pub fn encode_inputs(&self, mu: &Array, t: f64) -> Array {
        let n = mu.rows();
        let mut data = Vec::with_capacity(n * self.input_dim());
        let mut t_code = Vec::new();
        self.time_enc.encode_into(&[t], &mut t_code);
        for i in 0..n {
            self.pos_enc.encode_into(mu.row(i), &mut data);
            data.extend_from_slice(&t_code);
        }
        Array::new(vec![n, self.input_dim()], data).expect("encoding shape")
    }

    /// Layers in a fixed order: hidden layers then heads.
    pub fn layers(&self) -> impl Iterator<Item = &Linear> {
        self.hidden.iter().chain(self.heads.iter())
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Linear> {
        self.hidden.iter_mut().chain(self.heads.iter_mut())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> DeformVars {
        DeformVars {
            hidden: self.hidden.iter().map(|l| LinearVars::bind(tape, l, trainable)).collect(),
            heads: self.heads.clone().map(|l| LinearVars::bind(tape, &l, trainable)),
            skip: self.skip,
        }
    }

    /// Weight and bias of every layer, in [`DeformVars::all`] order.
    pub fn tensors(&self) -> Vec<&Array> {
        self.layers().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    /// Handles built from leaves already on the tape, consumed in
    /// [`Self::tensors`] order.
    pub fn vars_from(&self, leaves: &mut impl Iterator<Item = Var>) -> DeformVars {
        let mut next = || LinearVars {
            weight: leaves.next().expect("weight leaf"),
            bias: leaves.next().expect("bias leaf"),
        };
        DeformVars {
            hidden: self.hidden.iter().map(|_| next()).collect(),
            heads: [next(), next(), next(), next()],
            skip: self.skip,
        }
    }

    /// Plain (tape-free) forward pass over encoded rows.
    pub fn evaluate(&self, enc: &Array) -> DeformOffsets {
        let n = enc.rows();
        let mut h = enc.data().to_vec();
        for (l, layer) in self.hidden.iter().enumerate() {
            h = layer.apply(&h, n);
            relu_in_place(&mut h);
            if l == self.skip {
                h = concat_rows(&h, layer.outputs(), enc.data(), enc.row_len(), n);
            }
        }
        let out: Vec<Array> = self
            .heads
            .iter()
            .map(|head| Array::new(vec![n, head.outputs()], head.apply(&h, n)).expect("head shape"))
            .collect();
        let [d_mu, d_rot, d_scale, d_color]: [Array; 4] = out.try_into().expect("four heads");
        DeformOffsets {
            d_mu,
            d_rot,
            d_scale,
            d_color,
        }
    }
}

fn concat_rows(a: &[f64], wa: usize, b: &[f64], wb: usize, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * (wa + wb));
    for i in 0..n {
        out.extend_from_slice(&a[i * wa..(i + 1) * wa]);
        out.extend_from_slice(&b[i * wb..(i + 1) * wb]);
    }
    out
}

/// Tape handles of a bound [`DeformNet`].
#[derive(Clone, Debug)]
pub struct DeformVars {
    pub hidden: Vec<LinearVars>,
    pub heads: [LinearVars; 4],
    skip: usize,
}

/// Tape handles of the four offset heads.
#[derive(Clone, Copy, Debug)]
pub struct OffsetVars {
    pub d_mu: Var,
    pub d_rot: Var,
    pub d_scale: Var,
    pub d_color: Var,
}

impl DeformVars {
    pub fn all(&self) -> Vec<Var> {
        self.hidden
            .iter()
            .chain(self.heads.iter())
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }

    pub fn forward(&self, tape: &mut Tape, enc: Var) -> Result<OffsetVars, KernelError> {
        let mut h = enc;
        for (l, layer) in self.hidden.iter().enumerate() {
            h = layer.forward(tape, h)?;
            h = tape.relu(h);
            if l == self.skip {
                h = tape.concat(&[h, enc])?;
            }
        }
        let [d_mu, d_rot, d_scale, d_color] = self.heads;
        Ok(OffsetVars {
            d_mu: d_mu.forward(tape, h)?,
            d_rot: d_rot.forward(tape, h)?,
            d_scale: d_scale.forward(tape, h)?,
            d_color: d_color.forward(tape, h)?,
        })
    }
}

/// Offsets for every point at time `t`. Before `warmup` iterations the
/// network is not evaluated and the offsets are exactly zero.
pub fn deform(mu: &Array, t: f64, net: &DeformNet, iteration: usize, warmup: usize) -> Result<DeformOffsets> {
    if iteration < warmup {
        return Ok(DeformOffsets::zeros(mu.rows()));
    }
    Ok(net.evaluate(&net.encode_inputs(mu, t)))
}
