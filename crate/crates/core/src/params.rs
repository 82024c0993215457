//! Named, seeded parameter storage shared by every trainable module.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle::{DType, Device, Shape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

/// Owns every trainable tensor under a dotted name such as
/// `mapper.layers.3.attn.qkv.weight`. Modules keep handles that share
/// storage with the vars here, so optimizer updates are visible to them.
pub struct ParamStore {
    device: Device,
    dtype: DType,
    vars: BTreeMap<String, Var>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("dtype", &self.dtype)
            .field("tensors", &self.vars.len())
            .field("elements", &self.num_elements(""))
            .finish()
    }
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            device: Device::Cpu,
            dtype,
            vars: BTreeMap::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn add(&mut self, name: &str, shape: Shape, values: Vec<f32>) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Parameter(format!("parameter {name} registered twice")));
        }
        let var = match self.dtype {
            DType::F64 => {
                let v: Vec<f64> = values.into_iter().map(f64::from).collect();
                Var::from_vec(v, shape, &self.device)?
            }
            DType::F32 => Var::from_vec(values, shape, &self.device)?,
            other => return Err(Error::Parameter(format!("unsupported parameter dtype {other:?}"))),
        };
        let t = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(t)
    }

    /// Uniform in `[-bound, bound)`. Values are drawn in `f32` whatever the
    /// store dtype, so f32 and f64 stores built from one seed agree.
    pub fn uniform<S: Into<Shape>, R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: S,
        bound: f32,
        rng: &mut R,
    ) -> Result<Tensor> {
        let shape = shape.into();
        let values = if bound > 0.0 {
            (0..shape.elem_count()).map(|_| rng.random_range(-bound..bound)).collect()
        } else {
            vec![0.0; shape.elem_count()]
        };
        self.add(name, shape, values)
    }

    pub fn constant<S: Into<Shape>>(&mut self, name: &str, shape: S, value: f32) -> Result<Tensor> {
        let shape = shape.into();
        let values = vec![value; shape.elem_count()];
        self.add(name, shape, values)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn num_elements(&self, prefix: &str) -> usize {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    fn var(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::Parameter(format!("no parameter named {name}")))
    }

    /// Overwrites every entry of one tensor.
    pub fn fill(&self, name: &str, value: f64) -> Result<()> {
        let var = self.var(name)?;
        let t = Tensor::full(value, var.shape(), &self.device)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }

    /// Sets every tensor whose name starts with `prefix` to `value`.
    pub fn fill_prefix(&self, prefix: &str, value: f64) -> Result<()> {
        let names: Vec<String> = self.vars.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
        for n in names {
            self.fill(&n, value)?;
        }
        Ok(())
    }

    pub fn element(&self, name: &str, index: usize) -> Result<f64> {
        let v = self.var(name)?.as_tensor().flatten_all()?.to_dtype(DType::F64)?;
        Ok(v.get(index)?.to_scalar::<f64>()?)
    }

    pub fn set_element(&self, name: &str, index: usize, value: f64) -> Result<()> {
        let var = self.var(name)?;
        let mut flat: Vec<f64> = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
        if index >= flat.len() {
            return Err(Error::Parameter(format!("{name}[{index}] out of range")));
        }
        flat[index] = value;
        let t = Tensor::from_vec(flat, var.shape(), &self.device)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }

    /// Raw little-endian bytes of every tensor under `prefix`, in name order.
    pub fn state_bytes(&self, prefix: &str) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for (name, var) in self.vars.iter().filter(|(k, _)| k.starts_with(prefix)) {
            out.extend_from_slice(name.as_bytes());
            let flat = var.as_tensor().flatten_all()?;
            match self.dtype {
                DType::F64 => flat
                    .to_vec1::<f64>()?
                    .iter()
                    .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                _ => flat
                    .to_dtype(DType::F32)?
                    .to_vec1::<f32>()?
                    .iter()
                    .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        Ok(out)
    }

    /// Values of every tensor under `prefix`, widened to f64.
    pub fn snapshot(&self, prefix: &str) -> Result<BTreeMap<String, Vec<f64>>> {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1()?)))
            .collect()
    }

    pub fn tensors(&self) -> HashMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Copies values in from `tensors`. Names and shapes must match exactly.
    pub fn load_tensors(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for name in tensors.keys() {
            if !self.vars.contains_key(name) {
                return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
            }
        }
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != var.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {:?}, expected {:?}",
                    t.shape(),
                    var.shape()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    pub fn save_safetensors(&self, path: impl AsRef<Path>) -> Result<()> {
        candle::safetensors::save(&self.tensors(), path.as_ref())?;
        Ok(())
    }

    pub fn load_safetensors(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tensors = candle::safetensors::load(path, &self.device)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        self.load_tensors(&tensors)
    }
}

/// L2 norm of the difference between two snapshots taken with
/// [`ParamStore::snapshot`].
pub fn snapshot_distance(a: &BTreeMap<String, Vec<f64>>, b: &BTreeMap<String, Vec<f64>>) -> f64 {
    a.iter()
        .map(|(k, va)| {
            b.get(k)
                .map(|vb| va.iter().zip(vb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
                .unwrap_or(f64::INFINITY)
        })
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn f32_and_f64_stores_agree_on_init() {
        let mut a = ParamStore::new(DType::F32);
        let mut b = ParamStore::new(DType::F64);
        let ta = a.uniform("w", (3, 4), 0.5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let tb = b.uniform("w", (3, 4), 0.5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let va: Vec<f32> = ta.flatten_all().unwrap().to_vec1().unwrap();
        let vb: Vec<f64> = tb.flatten_all().unwrap().to_vec1().unwrap();
        for (x, y) in va.iter().zip(&vb) {
            assert_eq!(*x as f64, *y);
        }
    }

    #[test]
    fn handles_share_storage_with_vars() {
        let mut s = ParamStore::new(DType::F32);
        let t = s.constant("b", 4, 1.0).unwrap();
        s.set_element("b", 2, 5.0).unwrap();
        assert_eq!(t.to_vec1::<f32>().unwrap(), vec![1.0, 1.0, 5.0, 1.0]);
        assert_eq!(s.element("b", 2).unwrap(), 5.0);
        assert!(s.constant("b", 4, 0.0).is_err());
    }

    #[test]
    fn safetensors_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::new(DType::F32);
        s.uniform("x.w", (2, 3), 1.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        s.constant("x.b", 3, 0.25).unwrap();
        s.save_safetensors(dir.path().join("p.safetensors")).unwrap();

        let mut t = ParamStore::new(DType::F32);
        t.constant("x.w", (2, 3), 0.0).unwrap();
        t.constant("x.b", 3, 0.0).unwrap();
        t.load_safetensors(dir.path().join("p.safetensors")).unwrap();
        assert_eq!(s.state_bytes("").unwrap(), t.state_bytes("").unwrap());

        let mut wrong = ParamStore::new(DType::F32);
        wrong.constant("x.w", (3, 2), 0.0).unwrap();
        wrong.constant("x.b", 3, 0.0).unwrap();
        assert!(wrong.load_safetensors(dir.path().join("p.safetensors")).is_err());
    }
}
