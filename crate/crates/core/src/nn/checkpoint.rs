//! Binary model files.
//!
//! All integers and floats are little-endian. Layout:
//!
//! ```text
//! magic       8 bytes   b"NDIMODEL"
//! version     u32       1
//! kind        str       model kind tag, e.g. "made", "ebm", "mlp"
//! metadata    u32 n, then n × (str key, str value)
//! shift       u32 d, then d × f64      (standardization mean, d may be 0)
//! scale       u32 d, then d × f64      (standardization std)
//! networks    u32 n, then n × network
//! arrays      u32 n, then n × (str name, u64 len, len × f64)
//!
//! str         u32 byte length, UTF-8 bytes
//! network     u32 w, then w × u32 layer widths
//!             u8 hidden activation, u8 output activation (0 identity, 1 tanh)
//!             per layer (in → out):
//!               in·out × f64 weight (row-major, in × out), out × f64 bias
//!               u8 mask flag; if 1: in·out × f64 mask
//!               u8 spectral flag; if 1: out × f64 power-iteration vector
//! ```

use std::collections::BTreeMap;

use super::{Activation, Linear, Mlp, NnError};
use crate::autodiff::Tensor;

pub const MAGIC: &[u8; 8] = b"NDIMODEL";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Default)]
pub struct ModelFile {
    pub kind: String,
    pub metadata: BTreeMap<String, String>,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
    pub networks: Vec<Mlp>,
    pub arrays: Vec<(String, Vec<f64>)>,
}

impl ModelFile {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            ..Self::default()
        }
    }

    pub fn array(&self, name: &str) -> Option<&[f64]> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.str(&self.kind);
        w.u32(self.metadata.len() as u32);
        for (k, v) in &self.metadata {
            w.str(k);
            w.str(v);
        }
        w.u32(self.shift.len() as u32);
        w.f64s(&self.shift);
        w.u32(self.scale.len() as u32);
        w.f64s(&self.scale);
        w.u32(self.networks.len() as u32);
        for net in &self.networks {
            write_mlp(&mut w, net);
        }
        w.u32(self.arrays.len() as u32);
        for (name, data) in &self.arrays {
            w.str(name);
            w.0.extend_from_slice(&(data.len() as u64).to_le_bytes());
            w.f64s(data);
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {version}")));
        }
        let kind = r.str()?;
        let mut metadata = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.str()?;
            let v = r.str()?;
            metadata.insert(k, v);
        }
        let n = r.u32()? as usize;
        let shift = r.f64s(n)?;
        let n = r.u32()? as usize;
        let scale = r.f64s(n)?;
        let mut networks = Vec::new();
        for _ in 0..r.u32()? {
            networks.push(read_mlp(&mut r)?);
        }
        let mut arrays = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
            arrays.push((name, r.f64s(len)?));
        }
        if r.pos != bytes.len() {
            return Err(NnError::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            kind,
            metadata,
            shift,
            scale,
            networks,
            arrays,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), NnError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, NnError> {
        let bytes = std::fs::read(path).map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, x: u32) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn u8(&mut self, x: u8) {
        self.0.push(x);
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn f64s(&mut self, xs: &[f64]) {
        for x in xs {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| NnError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u8(&mut self) -> Result<u8, NnError> {
        Ok(self.take(1)?[0])
    }
    fn str(&mut self) -> Result<String, NnError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| NnError::Checkpoint("invalid utf-8".into()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, NnError> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| NnError::Checkpoint("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn write_mlp(w: &mut Writer, net: &Mlp) {
    let widths = net.widths();
    w.u32(widths.len() as u32);
    for &x in &widths {
        w.u32(x as u32);
    }
    w.u8(net.hidden_activation().code());
    w.u8(net.output_activation().code());
    for layer in net.layers() {
        w.f64s(layer.weight.data());
        w.f64s(layer.bias.data());
        match &layer.mask {
            Some(m) => {
                w.u8(1);
                w.f64s(m.data());
            }
            None => w.u8(0),
        }
        match &layer.spectral_u {
            Some(u) => {
                w.u8(1);
                w.f64s(u);
            }
            None => w.u8(0),
        }
    }
}

fn read_mlp(r: &mut Reader<'_>) -> Result<Mlp, NnError> {
    let n = r.u32()? as usize;
    if n < 2 {
        return Err(NnError::Checkpoint("network needs at least two widths".into()));
    }
    let widths = (0..n).map(|_| r.u32().map(|x| x as usize)).collect::<Result<Vec<_>, _>>()?;
    let bad_act = || NnError::Checkpoint("unknown activation code".into());
    let hidden = Activation::from_code(r.u8()?).ok_or_else(bad_act)?;
    let output = Activation::from_code(r.u8()?).ok_or_else(bad_act)?;
    let mut layers = Vec::with_capacity(n - 1);
    for pair in widths.windows(2) {
        let (i, o) = (pair[0], pair[1]);
        let weight = Tensor::from_vec(i, o, r.f64s(i * o)?);
        let bias = Tensor::from_vec(1, o, r.f64s(o)?);
        let mask = match r.u8()? {
            0 => None,
            _ => Some(Tensor::from_vec(i, o, r.f64s(i * o)?)),
        };
        let spectral_u = match r.u8()? {
            0 => None,
            _ => Some(r.f64s(o)?),
        };
        layers.push(Linear {
            weight,
            bias,
            mask,
            spectral_u,
        });
    }
    Mlp::from_layers(layers, hidden, output)
}
