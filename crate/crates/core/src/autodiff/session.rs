use std::collections::HashMap;

use super::{Tape, Tensor, Var};

/// A tape plus the parameter tensors bound to it.
///
/// Each parameter is registered once per session no matter how many times
/// the model reads it, so its gradient is the total derivative.
#[derive(Debug, Default)]
pub struct Session {
    pub tape: Tape,
    bound: HashMap<usize, Var>,
}

impl Session {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn inference() -> Self {
        Self { tape: Tape::inference(), bound: HashMap::new() }
    }

    /// Leaf for `t`, registering it on first use. Identity is the tensor's
    /// address, so the owner must not move while the session is alive.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let key = t as *const Tensor as usize;
        if let Some(v) = self.bound.get(&key) {
            return *v;
        }
        let v = self.tape.leaf(t);
        self.bound.insert(key, v);
        v
    }

    pub fn bound(&self, t: &Tensor) -> Option<Var> {
        self.bound.get(&(t as *const Tensor as usize)).copied()
    }
}
