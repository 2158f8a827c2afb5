use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::ops::{Conv2d, GroupNorm, Linear};
use crate::rng::SimRng;
use crate::scalar::Real;

/// Location of one named parameter blob inside the flat vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat parameter vector with a table of named blobs.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry>,
    values: Vec<T>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            entries: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &self.values[e.offset..e.offset + e.len()])
    }

    fn push(&mut self, name: String, shape: Vec<usize>, values: impl IntoIterator<Item = T>) -> usize {
        let offset = self.values.len();
        self.values.extend(values);
        let entry = ParamEntry { name, shape, offset };
        debug_assert_eq!(self.values.len(), offset + entry.len());
        self.entries.push(entry);
        offset
    }

    /// Replaces all values, checking that the blob table matches.
    pub fn load(&mut self, entries: &[ParamEntry], values: Vec<T>) -> Result<()> {
        if entries != self.entries.as_slice() {
            let first = self
                .entries
                .iter()
                .zip(entries)
                .find(|(a, b)| a != b)
                .map(|(a, _)| a.name.clone())
                .unwrap_or_else(|| "<count>".into());
            return Err(Error::Incompatible(format!(
                "parameter layout differs from architecture (first mismatch at {first})"
            )));
        }
        if values.len() != self.values.len() {
            return Err(Error::Incompatible(format!(
                "expected {} parameters, found {}",
                self.values.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Incompatible("checkpoint contains non-finite parameters".into()));
        }
        self.values = values;
        Ok(())
    }
}

/// Allocates and initializes layers in a fixed order.
pub struct ParamBuilder<'a, T> {
    pub store: ParamStore<T>,
    rng: &'a mut SimRng,
}

impl<'a, T: Real> ParamBuilder<'a, T> {
    pub fn new(rng: &'a mut SimRng) -> Self {
        ParamBuilder {
            store: ParamStore::default(),
            rng,
        }
    }

    fn uniform(&mut self, n: usize, bound: f64) -> Vec<T> {
        (0..n).map(|_| T::of(self.rng.random_range(-bound..bound))).collect()
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Conv2d {
        let fan_in = cin * k * k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = self.uniform(cout * fan_in, bound);
        let b = self.uniform(cout, bound);
        let weight = self.store.push(format!("{name}.weight"), vec![cout, cin, k, k], w);
        let bias = self.store.push(format!("{name}.bias"), vec![cout], b);
        Conv2d {
            weight,
            bias,
            cin,
            cout,
            k,
            stride,
        }
    }

    pub fn linear(&mut self, name: &str, fin: usize, fout: usize) -> Linear {
        let bound = 1.0 / (fin as f64).sqrt();
        let w = self.uniform(fin * fout, bound);
        let b = self.uniform(fout, bound);
        let weight = self.store.push(format!("{name}.weight"), vec![fout, fin], w);
        let bias = self.store.push(format!("{name}.bias"), vec![fout], b);
        Linear { weight, bias, fin, fout }
    }

    pub fn group_norm(&mut self, name: &str, channels: usize, groups: usize) -> GroupNorm {
        let gamma = self
            .store
            .push(format!("{name}.gamma"), vec![channels], vec![T::one(); channels]);
        let beta = self
            .store
            .push(format!("{name}.beta"), vec![channels], vec![T::zero(); channels]);
        GroupNorm {
            gamma,
            beta,
            channels,
            groups,
        }
    }
}
