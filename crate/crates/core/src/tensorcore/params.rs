use crate::error::{Error, Result};

use super::Tensor;

/// One named parameter with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
    /// Set once a backward pass has written into `grad` since the last step.
    pub grad_ready: bool,
}

/// Ordered collection of named parameters. Insertion order is preserved and
/// defines checkpoint layout and optimizer iteration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, ParamEntry)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::config(format!("duplicate parameter `{name}`")));
        }
        let grad = Tensor::zeros(value.shape());
        self.entries.push((
            name,
            ParamEntry {
                value,
                grad,
                trainable,
                grad_ready: false,
            },
        ));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, e)| e)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), e))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry)> {
        self.entries.iter_mut().map(|(n, e)| (n.as_str(), e))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, e)| e.value.len()).sum()
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let entry = self
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))?;
        entry.trainable = trainable;
        Ok(())
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        let entry = self
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))?;
        entry.grad.add_assign(grad)?;
        entry.grad_ready = true;
        Ok(())
    }

    /// Gradients that were not written since the last clear are already zero.
    pub fn zero_grads(&mut self) {
        for (_, e) in &mut self.entries {
            if e.grad_ready {
                e.grad.fill(0.0);
                e.grad_ready = false;
            }
        }
    }

    /// FNV-1a over the bit patterns of every value whose name starts with
    /// `prefix`; used to assert that frozen parameters never move.
    pub fn checksum(&self, prefix: &str) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        for (name, e) in &self.entries {
            if !name.starts_with(prefix) {
                continue;
            }
            for byte in name.bytes().chain(e.value.data().iter().flat_map(|v| v.to_le_bytes())) {
                hash ^= byte as u64;
                hash = hash.wrapping_mul(0x0100_0000_01b3);
            }
        }
        hash
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grads_match_value_shapes() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::zeros(&[2, 3]), true).unwrap();
        store.insert("b", Tensor::zeros(&[4]), false).unwrap();
        for (_, e) in store.iter() {
            assert_eq!(e.grad.shape(), e.value.shape());
        }
        assert!(store.insert("a", Tensor::zeros(&[1]), true).is_err());
        assert!(store.accumulate_grad("a", &Tensor::zeros(&[3])).is_err());
        assert_eq!(store.num_scalars(), 10);
    }

    #[test]
    fn checksum_tracks_prefix() {
        let mut store = ParamStore::new();
        store.insert("enc.w", Tensor::zeros(&[2]), true).unwrap();
        store.insert("dec.w", Tensor::zeros(&[2]), true).unwrap();
        let before = store.checksum("enc.");
        store.get_mut("dec.w").unwrap().value.data_mut()[0] = 1.0;
        assert_eq!(store.checksum("enc."), before);
        store.get_mut("enc.w").unwrap().value.data_mut()[0] = 1.0;
        assert_ne!(store.checksum("enc."), before);
    }
}
