use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;

use crate::error::{invalid, shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tnsr::{ManifestEntry, TnsrFile};

use super::graph::{Graph, Grads};
use super::tensor::Tensor;

/// Named parameters plus the set of names the optimizer must leave alone.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet<T = f32> {
    params: BTreeMap<String, Tensor<T>>,
    frozen: BTreeSet<String>,
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new(), frozen: BTreeSet::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, mut t: Tensor<T>) {
        t.set_requires_grad(true);
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    /// Total scalar count of parameters whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.params.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, v)| v.numel()).sum()
    }

    pub fn freeze(&mut self, name: &str) -> Result<()> {
        if !self.params.contains_key(name) {
            return Err(invalid!("cannot freeze unknown parameter {name}"));
        }
        self.frozen.insert(name.to_string());
        Ok(())
    }

    /// Freezes every parameter under `prefix`; returns how many matched.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let names: Vec<String> = self.params.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
        let n = names.len();
        self.frozen.extend(names);
        n
    }

    pub fn freeze_all(&mut self) {
        self.frozen = self.params.keys().cloned().collect();
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn frozen_names(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(String::as_str)
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    /// Adds the parameter gradients of one backward pass into the grad slots.
    pub fn accumulate(&mut self, graph: &Graph<T>, grads: &Grads<T>) -> Result<()> {
        for (name, g) in graph.param_grads(grads) {
            if let Some(p) = self.params.get_mut(name) {
                p.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Copies of the selected parameter values, for before/after comparisons.
    pub fn snapshot(&self, mut keep: impl FnMut(&str) -> bool) -> BTreeMap<String, Vec<T>> {
        self.params
            .iter()
            .filter(|(k, _)| keep(k))
            .map(|(k, v)| (k.clone(), v.data().to_vec()))
            .collect()
    }

    pub fn frozen_snapshot(&self) -> BTreeMap<String, Vec<T>> {
        let frozen = self.frozen.clone();
        self.snapshot(|k| frozen.contains(k))
    }

    /// Packs every parameter into one f32 payload with a name manifest.
    pub fn to_tnsr(&self) -> TnsrFile {
        let mut payload = Vec::new();
        let mut manifest = Vec::with_capacity(self.params.len());
        for (name, t) in &self.params {
            let s = t.shape();
            manifest.push(ManifestEntry {
                name: name.clone(),
                offset: payload.len() as u64,
                dims: s.iter().map(|&d| d as u32).collect(),
            });
            payload.extend(t.data().iter().map(|v| v.to_f64_lossy() as f32));
        }
        TnsrFile { dims: vec![payload.len() as u32], payload, manifest: Some(manifest) }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_tnsr().write(path)
    }

    /// Overwrites values from a checkpoint; names and shapes must match exactly.
    pub fn load_from(&mut self, file: &TnsrFile, origin: &Path) -> Result<()> {
        let manifest = file.manifest.as_ref().ok_or_else(|| Error::format(origin, "checkpoint has no manifest"))?;
        let names: BTreeSet<&str> = manifest.iter().map(|e| e.name.as_str()).collect();
        if names.len() != self.params.len() || self.params.keys().any(|k| !names.contains(k.as_str())) {
            return Err(shape_err!(
                "checkpoint {} holds {} parameters that do not match the model's {}",
                origin.display(),
                names.len(),
                self.params.len()
            ));
        }
        for e in manifest {
            let p = self.params.get_mut(&e.name).expect("checked above");
            let dims: Vec<usize> = e.dims.iter().map(|&d| d as usize).collect();
            let want = super::tensor::pad_shape(&dims)?;
            if want != p.shape() {
                return Err(shape_err!("parameter {}: checkpoint {:?} vs model {:?}", e.name, dims, p.shape()));
            }
            let off = e.offset as usize;
            for (dst, &src) in p.data_mut().iter_mut().zip(&file.payload[off..off + e.len()]) {
                *dst = T::lit(src as f64);
            }
        }
        Ok(())
    }

    pub fn load(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = TnsrFile::read(path)?;
        self.load_from(&f, path)
    }
}

/// Weight initialization helper used while building models.
pub struct Init<'a, T, R: Rng> {
    pub params: &'a mut ParameterSet<T>,
    pub rng: &'a mut R,
}

impl<T: Scalar, R: Rng> Init<'_, T, R> {
    /// He-style normal weights scaled by `1/sqrt(fan_in)`.
    pub fn normal(&mut self, name: &str, dims: &[usize], fan_in: usize) {
        let std = (1.0 / fan_in.max(1) as f64).sqrt();
        let t = Tensor::randn(dims, std, self.rng);
        self.params.insert(name, t);
    }

    pub fn zeros(&mut self, name: &str, dims: &[usize]) {
        self.params.insert(name, Tensor::zeros(dims));
    }

    pub fn ones(&mut self, name: &str, dims: &[usize]) {
        self.params.insert(name, Tensor::full(dims, T::one()));
    }
}
