//! Multiresolution hash-grid color field with a small MLP decoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffkernel::{sigmoid, Array, KernelError, Tape, Var};
use crate::nn::{relu_in_place, Linear, LinearVars};

pub const HASH_PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

/// Axis-aligned box used to normalize positions into `[0, 1]^3`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    /// Bounding box of `points` grown by `margin` times its extent on every side.
    pub fn around(points: &Array, margin: f64) -> Self {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for i in 0..points.rows() {
            let r = points.row(i);
            for k in 0..3 {
                min[k] = min[k].min(r[k]);
                max[k] = max[k].max(r[k]);
            }
        }
        if points.rows() == 0 {
            return Self { min: [-1.0; 3], max: [1.0; 3] };
        }
        for k in 0..3 {
            // Flat axes still get a usable box.
            let pad = margin * (max[k] - min[k]).max(1e-3);
            min[k] -= pad;
            max[k] += pad;
        }
        Self { min, max }
    }

    /// Position mapped into the unit cube, clamped.
    pub fn normalize(&self, x: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|k| ((x[k] - self.min[k]) / (self.max[k] - self.min[k])).clamp(0.0, 1.0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HashGridConfig {
    pub levels: usize,
    pub log2_table_size: u32,
    pub feat_dim: usize,
    pub min_resolution: usize,
    pub max_resolution: usize,
    pub decoder_width: usize,
}

impl HashGridConfig {
    /// 16 levels from 16 to 2048, 2^20 entries per level, 2 features.
    pub const PAPER: Self = Self {
        levels: 16,
        log2_table_size: 20,
        feat_dim: 2,
        min_resolution: 16,
        max_resolution: 2048,
        decoder_width: 64,
    };

    /// Same grid with a 2^15 table, sized for small scenes.
    pub const DESK: Self = Self {
        log2_table_size: 15,
        ..Self::PAPER
    };

    pub fn table_size(&self) -> usize {
        1 << self.log2_table_size
    }

    pub fn feature_dim(&self) -> usize {
        self.levels * self.feat_dim
    }

    /// `floor(min * b^l)` with `b = (max / min)^(1 / (levels - 1))`.
    pub fn resolutions(&self) -> Vec<usize> {
        if self.levels == 1 {
            return vec![self.min_resolution];
        }
        let growth = (self.max_resolution as f64 / self.min_resolution as f64).powf(1.0 / (self.levels - 1) as f64);
        (0..self.levels)
            .map(|l| (self.min_resolution as f64 * growth.powi(l as i32) + 1e-9).floor() as usize)
            .collect()
    }
}

/// Hash tables for every level plus the color decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct HashColorField {
    pub config: HashGridConfig,
    resolutions: Vec<usize>,
    /// `[levels * table_size, feat_dim]`; level `l` owns rows `l*T .. (l+1)*T`.
    pub table: Array,
    /// `feature_dim -> w -> w -> 3`.
    pub decoder: [Linear; 3],
    pub aabb: Aabb,
}

/// Corner indices and trilinear weights for a batch of positions.
///
/// Entry `i * levels + l` of each corner list belongs to point `i`, level `l`.
#[derive(Clone, Debug, PartialEq)]
pub struct Lookup {
    pub points: usize,
    /// Table rows, one list per corner.
    pub rows: [Vec<usize>; 8],
    pub weights: [Vec<f64>; 8],
}

impl HashColorField {
    pub fn new<R: Rng + ?Sized>(config: HashGridConfig, aabb: Aabb, rng: &mut R) -> Self {
        let n = config.levels * config.table_size() * config.feat_dim;
        let table = (0..n).map(|_| rng.random_range(-1e-4..1e-4)).collect();
        let w = config.decoder_width;
        let decoder = [
            Linear::uniform(config.feature_dim(), w, rng),
            Linear::uniform(w, w, rng),
            Linear::uniform(w, 3, rng),
        ];
        Self::from_parts(config, Array::new(vec![n / config.feat_dim, config.feat_dim], table).expect("table shape"), decoder, aabb)
    }

    pub fn from_parts(config: HashGridConfig, table: Array, decoder: [Linear; 3], aabb: Aabb) -> Self {
        Self {
            resolutions: config.resolutions(),
            config,
            table,
            decoder,
            aabb,
        }
    }

    pub fn resolutions(&self) -> &[usize] {
        &self.resolutions
    }

    /// Whether level `l` is indexed densely (its vertex grid fits in the table).
    pub fn is_dense(&self, l: usize) -> bool {
        let side = self.resolutions[l] as u128 + 1;
        side * side * side <= self.config.table_size() as u128
    }

    /// Table entry (within level `l`) of integer vertex `v`.
    pub fn vertex_index(&self, l: usize, v: [usize; 3]) -> usize {
        let t = self.config.table_size();
        if self.is_dense(l) {
            let side = self.resolutions[l] + 1;
            v[0] + side * (v[1] + side * v[2])
        } else {
            let h = (v[0] as u32).wrapping_mul(HASH_PRIMES[0])
                ^ (v[1] as u32).wrapping_mul(HASH_PRIMES[1])
                ^ (v[2] as u32).wrapping_mul(HASH_PRIMES[2]);
            h as usize & (t - 1)
        }
    }

    /// Corner rows and weights for normalized positions.
    pub fn lookup(&self, x: &[[f64; 3]]) -> Lookup {
        let levels = self.config.levels;
        let t = self.config.table_size();
        let m = x.len() * levels;
        let mut rows: [Vec<usize>; 8] = std::array::from_fn(|_| Vec::with_capacity(m));
        let mut weights: [Vec<f64>; 8] = std::array::from_fn(|_| Vec::with_capacity(m));
        for p in x {
            for l in 0..levels {
                let res = self.resolutions[l];
                let mut cell = [0usize; 3];
                let mut frac = [0.0; 3];
                for k in 0..3 {
                    let pos = p[k].clamp(0.0, 1.0) * res as f64;
                    let c = (pos.floor() as usize).min(res - 1);
                    cell[k] = c;
                    frac[k] = pos - c as f64;
                }
                for corner in 0..8 {
                    let mut v = cell;
                    let mut w = 1.0;
                    for k in 0..3 {
                        if corner >> k & 1 == 1 {
                            v[k] += 1;
                            w *= frac[k];
                        } else {
                            w *= 1.0 - frac[k];
                        }
                    }
                    rows[corner].push(l * t + self.vertex_index(l, v));
                    weights[corner].push(w);
                }
            }
        }
        Lookup {
            points: x.len(),
            rows,
            weights,
        }
    }

    pub fn normalize_positions(&self, positions: &Array) -> Vec<[f64; 3]> {
        (0..positions.rows())
            .map(|i| {
                let r = positions.row(i);
                self.aabb.normalize([r[0], r[1], r[2]])
            })
            .collect()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> HashVars {
        let table = if trainable {
            tape.param(self.table.clone())
        } else {
            tape.constant(self.table.clone())
        };
        HashVars {
            table,
            decoder: self.decoder.clone().map(|l| LinearVars::bind(tape, &l, trainable)),
            feat_dim: self.config.feat_dim,
            levels: self.config.levels,
        }
    }

    /// Table, then decoder weights and biases, in [`HashVars::all`] order.
    pub fn tensors(&self) -> Vec<&Array> {
        std::iter::once(&self.table).chain(self.decoder.iter().flat_map(|l| [&l.weight, &l.bias])).collect()
    }

    /// Handles built from leaves already on the tape, consumed in
    /// [`Self::tensors`] order.
    pub fn vars_from(&self, leaves: &mut impl Iterator<Item = Var>) -> HashVars {
        let table = leaves.next().expect("table leaf");
        let decoder = [(); 3].map(|_| LinearVars {
            weight: leaves.next().expect("weight leaf"),
            bias: leaves.next().expect("bias leaf"),
        });
        HashVars {
            table,
            decoder,
            feat_dim: self.config.feat_dim,
            levels: self.config.levels,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.table.len() + self.decoder.iter().map(|l| l.weight.len() + l.bias.len()).sum::<usize>()
    }
}

/// Tape handles of a bound [`HashColorField`].
#[derive(Clone, Debug)]
pub struct HashVars {
    pub table: Var,
    pub decoder: [LinearVars; 3],
    feat_dim: usize,
    levels: usize,
}

impl HashVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.table];
        v.extend(self.decoder.iter().flat_map(|l| [l.weight, l.bias]));
        v
    }

    /// `[N, levels * feat_dim]` interpolated features.
    pub fn encode(&self, tape: &mut Tape, lookup: &Lookup) -> Result<Var, KernelError> {
        let m = lookup.points * self.levels;
        let f = self.feat_dim;
        let mut acc: Option<Var> = None;
        for corner in 0..8 {
            let idx = lookup.rows[corner].iter().flat_map(|&r| r * f..(r + 1) * f).collect();
            let g = tape.gather(self.table, idx, &[m, f])?;
            let w = tape.constant(Array::new(vec![m, 1], lookup.weights[corner].clone())?);
            let term = tape.mul(g, w)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, term)?,
                None => term,
            });
        }
        let acc = acc.expect("eight corners");
        tape.reshape(acc, &[lookup.points, self.levels * f])
    }

    /// Pre-sigmoid decoder output `[N, 3]`.
    pub fn decode_logits(&self, tape: &mut Tape, features: Var) -> Result<Var, KernelError> {
        let h = self.decoder[0].forward(tape, features)?;
        let h = tape.relu(h);
        let h = self.decoder[1].forward(tape, h)?;
        let h = tape.relu(h);
        self.decoder[2].forward(tape, h)
    }

    /// `sigmoid(decoder(h(x)))` for world positions given as plain values.
    pub fn base_color(&self, tape: &mut Tape, field: &HashColorField, positions: &Array) -> Result<Var, KernelError> {
        let lookup = field.lookup(&field.normalize_positions(positions));
        let feat = self.encode(tape, &lookup)?;
        let logits = self.decode_logits(tape, feat)?;
        Ok(tape.sigmoid(logits))
    }
}

/// Interpolated features of one normalized position, level-major.
pub fn hash_encode(x: [f64; 3], field: &HashColorField) -> Vec<f64> {
    let lookup = field.lookup(&[x]);
    let f = field.config.feat_dim;
    let mut out = vec![0.0; field.config.feature_dim()];
    for corner in 0..8 {
        for (l, (&r, &w)) in lookup.rows[corner].iter().zip(&lookup.weights[corner]).enumerate() {
            for k in 0..f {
                out[l * f + k] += w * field.table.data()[r * f + k];
            }
        }
    }
    out
}

/// Base color of one world position.
pub fn base_color(x: [f64; 3], field: &HashColorField) -> [f64; 3] {
    let mut h = hash_encode(field.aabb.normalize(x), field);
    for (i, layer) in field.decoder.iter().enumerate() {
        h = layer.apply(&h, 1);
        if i < 2 {
            relu_in_place(&mut h);
        }
    }
    [sigmoid(h[0]), sigmoid(h[1]), sigmoid(h[2])]
}

/// Base colors `[N, 3]` for `positions`, computed exactly as the training
/// graph computes them so renders from the cache match live renders.
pub fn bake_colors(positions: &Array, field: &HashColorField) -> Array {
    let mut tape = Tape::new();
    let vars = field.bind(&mut tape, false);
    let c = vars
        .base_color(&mut tape, field, positions)
        .expect("field shapes are consistent by construction");
    tape.value(c).clone()
}
