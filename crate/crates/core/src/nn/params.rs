//! Parameter storage shared by layers and optimizers.

use ndarray::ArrayD;

use crate::error::{CoreError, Result};

/// Optimizer group a parameter belongs to. The segmentation model and the MI
/// critic are optimized with separate settings (the critic takes no weight
/// decay), and gradient-isolation tests key off this split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Model,
    Critic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Flat store of named tensors and their gradient accumulators.
#[derive(Debug, Default)]
pub struct ParamStore {
    values: Vec<ArrayD<f64>>,
    grads: Vec<ArrayD<f64>>,
    names: Vec<String>,
    groups: Vec<ParamGroup>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f64>, group: ParamGroup) -> ParamId {
        let id = ParamId(self.values.len());
        self.grads.push(ArrayD::zeros(value.raw_dim()));
        self.values.push(value);
        self.names.push(name.into());
        self.groups.push(group);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &ArrayD<f64> {
        &self.grads[id.0]
    }

    pub(crate) fn grad_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.grads[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn ids_in_group(&self, group: ParamGroup) -> Vec<ParamId> {
        self.ids().filter(|&id| self.group(id) == group).collect()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    /// Sum of squared gradient entries over a group; used by isolation tests.
    pub fn grad_norm_sq(&self, group: ParamGroup) -> f64 {
        self.ids_in_group(group)
            .iter()
            .map(|&id| self.grad(id).iter().map(|g| g * g).sum::<f64>())
            .sum()
    }

    /// Serialize all parameter tensors (name, shape, data) to a flat buffer.
    ///
    /// Layout: u32 count, then per tensor: u32 name len + utf8 name,
    /// u8 group tag, u32 ndim + u64 dims, f64 little-endian data.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.values.len() as u32).to_le_bytes());
        for id in self.ids() {
            let name = self.name(id).as_bytes();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name);
            out.push(match self.group(id) {
                ParamGroup::Model => 0,
                ParamGroup::Critic => 1,
            });
            let v = self.value(id);
            out.extend_from_slice(&(v.ndim() as u32).to_le_bytes());
            for &d in v.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in v.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Inverse of [`ParamStore::to_bytes`].
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = 0usize;
        let take = |cur: &mut usize, n: usize| -> Result<&[u8]> {
            if *cur + n > bytes.len() {
                return Err(CoreError::validation("parameter buffer truncated"));
            }
            let s = &bytes[*cur..*cur + n];
            *cur += n;
            Ok(s)
        };
        let count = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut cur, name_len)?.to_vec())
                .map_err(|_| CoreError::validation("invalid parameter name"))?;
            let group = match take(&mut cur, 1)?[0] {
                0 => ParamGroup::Model,
                1 => ParamGroup::Critic,
                t => return Err(CoreError::validation(format!("unknown group tag {t}"))),
            };
            let ndim = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()) as usize);
            }
            let n: usize = dims.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()));
            }
            let arr = ArrayD::from_shape_vec(ndarray::IxDyn(&dims), data)
                .map_err(|e| CoreError::validation(format!("bad tensor shape: {e}")))?;
            store.add(name, arr, group);
        }
        Ok(store)
    }

    /// Copy values from another store with identical layout (names and shapes).
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(CoreError::validation(format!(
                "parameter count mismatch: {} vs {}",
                other.len(),
                self.len()
            )));
        }
        for id in self.ids() {
            if self.name(id) != other.name(id) || self.value(id).shape() != other.value(id).shape()
            {
                return Err(CoreError::validation(format!(
                    "parameter {} does not match checkpoint layout",
                    self.name(id)
                )));
            }
        }
        for id in self.ids() {
            let v = other.value(id).clone();
            *self.value_mut(id) = v;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn byte_round_trip() {
        let mut store = ParamStore::new();
        store.add(
            "w",
            ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, -2.0, 3.5, 0.0, 1e-9, 7.0]).unwrap(),
            ParamGroup::Model,
        );
        store.add(
            "critic.b",
            ArrayD::from_elem(IxDyn(&[4]), 0.25),
            ParamGroup::Critic,
        );
        let bytes = store.to_bytes();
        let back = ParamStore::from_bytes(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        for id in store.ids() {
            assert_eq!(store.name(id), back.name(id));
            assert_eq!(store.group(id), back.group(id));
            assert_eq!(store.value(id), back.value(id));
        }
    }
}
