//! Spike raster and rate time-series dumps.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

use super::RateSnapshot;

const MAGIC: &[u8; 4] = b"SNNR";
const VERSION: u32 = 1;

/// Bit-packed spike trains of one layer. Steps are stored one after the
/// other, each padded to a whole byte; neuron `k` is bit `k % 8` of byte
/// `k / 8` within its step.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub layer: String,
    pub shape: Vec<usize>,
    steps: usize,
    bits: Vec<u8>,
}

impl Raster {
    pub fn new(layer: String, shape: Vec<usize>) -> Self {
        Raster {
            layer,
            shape,
            steps: 0,
            bits: Vec::new(),
        }
    }

    fn neurons(&self) -> usize {
        self.shape.iter().product()
    }

    fn stride(&self) -> usize {
        self.neurons().div_ceil(8)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub(crate) fn push_step(&mut self, spikes: &[f32]) {
        let base = self.bits.len();
        self.bits.resize(base + self.stride(), 0);
        for (k, &s) in spikes.iter().enumerate() {
            if s != 0.0 {
                self.bits[base + k / 8] |= 1 << (k % 8);
            }
        }
        self.steps += 1;
    }

    pub fn spiked(&self, step: usize, neuron: usize) -> bool {
        self.bits[step * self.stride() + neuron / 8] & (1 << (neuron % 8)) != 0
    }

    /// Total spikes of one neuron.
    pub fn count(&self, neuron: usize) -> usize {
        (0..self.steps).filter(|&t| self.spiked(t, neuron)).count()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.bits.len() + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layer.len() as u32).to_le_bytes());
        out.extend_from_slice(self.layer.as_bytes());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.steps as u32).to_le_bytes());
        out.extend_from_slice(&self.bits);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        if c.word()? != VERSION as usize {
            return Err(bad("unsupported version"));
        }
        let name_len = c.word()?;
        let layer = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|_| bad("layer id is not utf-8"))?;
        let rank = c.word()?;
        let shape = (0..rank).map(|_| c.word()).collect::<Result<Vec<_>>>()?;
        let steps = c.word()?;
        let mut r = Raster::new(layer, shape);
        r.bits = c.take(steps * r.stride())?.to_vec();
        if c.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        r.steps = steps;
        Ok(r)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

fn bad(m: &str) -> Error {
    Error::Input(format!("raster: {m}"))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| bad("truncated"))?;
        self.pos += n;
        Ok(s)
    }

    fn word(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Writes `step,node,mean,min,max` rows summarizing each snapshot.
pub fn write_series_csv(
    series: &[RateSnapshot],
    layers: &[String],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut rows = String::from("step,node,mean,min,max\n");
    for snap in series {
        for id in layers {
            let Some(t) = snap.rates.get(id) else {
                continue;
            };
            let d = t.data();
            let n = d.len().max(1) as f64;
            let mean = d.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
            let min = d.iter().copied().fold(f32::INFINITY, f32::min);
            let max = d.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            rows.push_str(&format!("{},{},{},{},{}\n", snap.step, id, mean, min, max));
        }
    }
    f.write_all(rows.as_bytes()).map_err(|e| Error::io(path, e))
}
