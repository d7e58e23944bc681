use std::collections::HashSet;
use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"STCFPAR1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

/// Named trainable tensors with gradient buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    seed: u64,
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    seed: u64,
    params: Vec<HeaderEntry>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self { seed, names: Vec::new(), values: Vec::new(), grads: Vec::new() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.names.iter().any(|n| n == name) {
            return Err(Error::Config(format!("parameter `{name}` registered twice")));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("parameter `{name}` has non-finite values")));
        }
        self.names.push(name.to_string());
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    /// Uniform in ±√(6/(fan_in+fan_out)).
    pub fn add_xavier<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn add_constant(&mut self, name: &str, shape: &[usize], v: f64) -> Result<ParamId> {
        self.add(name, Tensor::filled(shape, v))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub(crate) fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut Tensor, &Tensor) {
        (&mut self.values[id.0], &self.grads[id.0])
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) -> Result<()> {
        let slot = &mut self.grads[id.0];
        if slot.shape() != g.shape() {
            return Err(Error::Shape(format!("gradient shape {:?} for parameter {:?}", g.shape(), slot.shape())));
        }
        slot.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn n_values(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Magic bytes, u64 LE header length, JSON header, then all values as LE f64.
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            seed: self.seed,
            params: self
                .names
                .iter()
                .zip(&self.values)
                .map(|(n, v)| HeaderEntry { name: n.clone(), shape: v.shape().to_vec() })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for v in &self.values {
            for x in v.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Parse { line: 0, msg: "not a parameter file".into() });
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        let mut store = ParamStore::new(header.seed);
        let mut seen = HashSet::new();
        for entry in header.params {
            if !seen.insert(entry.name.clone()) {
                return Err(Error::Parse { line: 0, msg: format!("duplicate parameter `{}`", entry.name) });
            }
            let n: usize = entry.shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            store.add(&entry.name, Tensor::new(entry.shape, data)?)?;
        }
        Ok(store)
    }

    /// Copies values from `other`, matching by name and shape.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let j = other
                .find(name)
                .ok_or_else(|| Error::Shape(format!("checkpoint lacks parameter `{name}`")))?;
            let v = other.value(j);
            if v.shape() != self.values[i].shape() {
                return Err(Error::Shape(format!("parameter `{name}` has shape {:?} in checkpoint", v.shape())));
            }
            self.values[i] = v.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new(0);
        s.add_constant("w", &[2], 0.0).unwrap();
        assert!(matches!(s.add_constant("w", &[3], 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn xavier_bounds() {
        let mut s = ParamStore::new(0);
        let id = s.add_xavier("w", &[20, 30], 20, 30, &mut stream(1)).unwrap();
        let b = (6.0f64 / 50.0).sqrt();
        assert!(s.value(id).data().iter().all(|v| v.abs() <= b));
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let mut s = ParamStore::new(42);
        s.add_xavier("a", &[3, 4], 3, 4, &mut stream(2)).unwrap();
        s.add_constant("b", &[4], -0.25).unwrap();
        let mut buf = Vec::new();
        s.save(&mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        let back = ParamStore::load(&buf[..]).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.seed(), 42);
        assert!(ParamStore::load(&b"garbage!"[..]).is_err());
    }
}
