//! MLP parameters, initialization and the binary checkpoint format.
//!
//! Checkpoint layout, all integers and floats little-endian:
//!
//! ```text
//! "LLPW"              4 bytes magic
//! version             u32 (= 1)
//! activation          u8  (0 = relu, 1 = tanh)
//! num_layers          u32
//! per layer:          d_out u32, d_in u32, has_bias u8
//! per layer:          weights (d_out * d_in f64, row-major), then bias (d_out f64) if present
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LlpError, Result};
use crate::numerics::DenseMatrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LLPW";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Tanh),
            _ => Err(LlpError::Checkpoint(format!("unknown activation code {c}"))),
        }
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    #[inline]
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
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = LlpError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(LlpError::invalid(format!("unknown activation `{other}`"))),
        }
    }
}

/// Architecture of an MLP classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub activation: Activation,
    /// Biases on hidden layers. The output layer always has one.
    #[serde(default)]
    pub hidden_bias: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `d_out x d_in`.
    pub weight: DenseMatrix,
    pub bias: Option<Vec<f64>>,
}

impl Layer {
    pub fn d_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }
}

/// Weights of an MLP; also used, with the same shapes, for gradients and
/// optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

impl ParamStore {
    /// Fan-in/fan-out scaled uniform weights `U(-r, r)`, `r = sqrt(6 / (d_in + d_out))`;
    /// zero biases.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        if spec.input_dim == 0 || spec.num_classes == 0 || spec.hidden.contains(&0) {
            return Err(LlpError::invalid("layer widths must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims: Vec<usize> = std::iter::once(spec.input_dim)
            .chain(spec.hidden.iter().copied())
            .chain(std::iter::once(spec.num_classes))
            .collect();
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (d_in, d_out) = (w[0], w[1]);
                let r = (6.0 / (d_in + d_out) as f64).sqrt();
                let weight = DenseMatrix::from_fn(d_out, d_in, |_, _| rng.random_range(-r..r));
                let bias = (l == last || spec.hidden_bias).then(|| vec![0.0; d_out]);
                Layer { weight, bias }
            })
            .collect();
        Ok(Self {
            layers,
            activation: spec.activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, Layer::d_out)
    }

    /// All-zero store of the same shape.
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: DenseMatrix::zeros(l.d_out(), l.d_in()),
                    bias: l.bias.as_ref().map(|b| vec![0.0; b.len()]),
                })
                .collect(),
            activation: self.activation,
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weight.same_shape(&b.weight)
                    && a.bias.as_ref().map(Vec::len) == b.bias.as_ref().map(Vec::len)
            })
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.as_ref().map_or(0, Vec::len))
            .sum()
    }

    /// Flat view in checkpoint order: per layer, weights then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            if let Some(b) = &l.bias {
                out.extend_from_slice(b);
            }
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(LlpError::DimensionMismatch {
                what: "flat parameters",
                expected: self.num_params(),
                found: flat.len(),
            });
        }
        let mut off = 0;
        for l in &mut self.layers {
            let w = l.weight.data_mut();
            let len = w.len();
            w.copy_from_slice(&flat[off..off + len]);
            off += len;
            if let Some(b) = &mut l.bias {
                let len = b.len();
                b.copy_from_slice(&flat[off..off + len]);
                off += len;
            }
        }
        Ok(())
    }

    /// Applies `f(self_entry, other_entry)` in place over matching entries.
    pub(crate) fn zip_apply(&mut self, other: &Self, mut f: impl FnMut(&mut f64, f64)) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, &y) in a.weight.data_mut().iter_mut().zip(b.weight.data()) {
                f(x, y);
            }
            if let (Some(ab), Some(bb)) = (&mut a.bias, &b.bias) {
                for (x, &y) in ab.iter_mut().zip(bb) {
                    f(x, y);
                }
            }
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        self.zip_apply(other, |x, y| *x += scale * y);
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight.data_mut().iter_mut().for_each(|x| *x *= s);
            if let Some(b) = &mut l.bias {
                b.iter_mut().for_each(|x| *x *= s);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|x| x.is_finite())
    }

    pub fn write_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_checkpoint_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + 9 * self.layers.len() + 8 * self.num_params());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.push(self.activation.code());
        buf.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            buf.extend_from_slice(&(l.d_out() as u32).to_le_bytes());
            buf.extend_from_slice(&(l.d_in() as u32).to_le_bytes());
            buf.push(u8::from(l.bias.is_some()));
        }
        for x in self.to_flat() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        buf
    }

    pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::from_checkpoint_bytes(&bytes)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(LlpError::Checkpoint("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(LlpError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let activation = Activation::from_code(cur.u8()?)?;
        let num_layers = cur.u32()? as usize;
        if num_layers == 0 {
            return Err(LlpError::Checkpoint("no layers".into()));
        }
        let mut shapes = Vec::with_capacity(num_layers);
        for _ in 0..num_layers {
            let d_out = cur.u32()? as usize;
            let d_in = cur.u32()? as usize;
            let has_bias = match cur.u8()? {
                0 => false,
                1 => true,
                b => return Err(LlpError::Checkpoint(format!("bad bias flag {b}"))),
            };
            shapes.push((d_out, d_in, has_bias));
        }
        for w in shapes.windows(2) {
            if w[0].0 != w[1].1 {
                return Err(LlpError::Checkpoint("layer dimensions do not chain".into()));
            }
        }
        let mut layers = Vec::with_capacity(num_layers);
        for (d_out, d_in, has_bias) in shapes {
            let weight = DenseMatrix::from_vec(d_out, d_in, cur.f64s(d_out * d_in)?)?;
            let bias = if has_bias {
                Some(cur.f64s(d_out)?)
            } else {
                None
            };
            layers.push(Layer { weight, bias });
        }
        if cur.pos != bytes.len() {
            return Err(LlpError::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { layers, activation })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| LlpError::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| LlpError::Checkpoint("size overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
