use std::sync::atomic::{AtomicU64, Ordering};

use crate::{Scalar, Tensor};

static NEXT_KEY: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a parameter. Clones share the key, so a
/// snapshot of a model still resolves to the same gradient slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey(u64);

impl ParamKey {
    pub fn fresh() -> Self {
        Self(NEXT_KEY.fetch_add(1, Ordering::Relaxed))
    }
}

/// A named tensor owned by a model.
///
/// Frozen parameters enter a graph as constants: the tape never allocates or
/// propagates a gradient for them.
#[derive(Debug, Clone)]
pub struct Param<S> {
    key: ParamKey,
    pub name: String,
    pub value: Tensor<S>,
    trainable: bool,
}

impl<S: Scalar> Param<S> {
    pub fn new(name: impl Into<String>, value: Tensor<S>, trainable: bool) -> Self {
        Self { key: ParamKey::fresh(), name: name.into(), value, trainable }
    }

    pub fn trainable(name: impl Into<String>, value: Tensor<S>) -> Self {
        Self::new(name, value, true)
    }

    pub fn frozen(name: impl Into<String>, value: Tensor<S>) -> Self {
        Self::new(name, value, false)
    }

    pub fn key(&self) -> ParamKey {
        self.key
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }
}

/// Anything that owns parameters in a stable order.
pub trait Module<S: Scalar> {
    fn params(&self) -> Vec<&Param<S>>;
    fn params_mut(&mut self) -> Vec<&mut Param<S>>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.numel()).sum()
    }

    fn set_trainable(&mut self, trainable: bool) {
        for p in self.params_mut() {
            p.set_trainable(trainable);
        }
    }
}

/// Order-sensitive digest over names and exact bit patterns of parameters.
pub fn checksum<'a, S: Scalar>(params: impl IntoIterator<Item = &'a Param<S>>) -> u64 {
    // FNV-1a, 64-bit
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for b in bytes {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for p in params {
        eat(p.name.as_bytes());
        for d in p.value.shape() {
            eat(&(*d as u64).to_le_bytes());
        }
        for x in p.value.data() {
            eat(&x.as_f64().to_bits().to_le_bytes());
        }
    }
    h
}
