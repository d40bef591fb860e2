use std::cell::RefCell;
use std::collections::{HashMap, HashSet};

use super::Tensor;
use crate::error::{Error, Result};

/// Per-backward-pass adjoint buffers, keyed by tensor identity. Adjoints are
/// transient; [`Tape::backward`] folds them into each tensor's persistent
/// gradient at the end of the pass.
pub(crate) struct Adjoints {
    map: HashMap<usize, Vec<f64>>,
}

impl Adjoints {
    fn new() -> Self {
        Adjoints {
            map: HashMap::new(),
        }
    }


    /// Applies `f` to the (lazily zero-initialized) adjoint buffer of `t`.
    /// Tensors outside the gradient path are skipped.
    pub(crate) fn add(&mut self, t: &Tensor, f: impl FnOnce(&mut [f64])) {
        if !t.needs_grad() {
            return;
        }
        let buf = self.map.entry(t.id()).or_insert_with(|| vec![0.0; t.numel()]);
        f(buf);
    }
}

struct Recorded {
    out: Tensor,
    back: Box<dyn Fn(&[f64], &mut Adjoints)>,
}

/// Records operations for one forward pass. Create a fresh tape per
/// optimization step; dropping it releases the recording.
pub struct Tape {
    ops: RefCell<Vec<Recorded>>,
    touched: RefCell<Vec<Tensor>>,
    seen: RefCell<HashSet<usize>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            ops: RefCell::new(Vec::new()),
            touched: RefCell::new(Vec::new()),
            seen: RefCell::new(HashSet::new()),
        }
    }

    pub fn num_ops(&self) -> usize {
        self.ops.borrow().len()
    }

    /// Registers an op on the tape. The output inherits `requires_grad` from
    /// the inputs; ops whose inputs are all constants are not recorded.
    pub(crate) fn record(
        &self,
        inputs: &[&Tensor],
        out: &Tensor,
        back: impl Fn(&[f64], &mut Adjoints) + 'static,
    ) {
        if !inputs.iter().any(|t| t.needs_grad()) {
            return;
        }
        out.set_requires_grad(true);
        {
            let mut seen = self.seen.borrow_mut();
            let mut touched = self.touched.borrow_mut();
            for t in inputs.iter().copied().chain(std::iter::once(out)) {
                if seen.insert(t.id()) {
                    touched.push(t.clone());
                }
            }
        }
        self.ops.borrow_mut().push(Recorded {
            out: out.clone(),
            back: Box::new(back),
        });
    }

    /// Reverse pass from a scalar loss. Visits recorded ops in exact reverse
    /// order and accumulates adjoints additively into the `grad` buffer of
    /// every tensor with `requires_grad`. Tensors the loss does not reach
    /// keep (or get) a zero gradient.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::NonScalarLoss(loss.shape()));
        }
        let mut adjoints = Adjoints::new();
        adjoints.map.insert(loss.id(), vec![1.0]);

        let ops = self.ops.borrow();
        for op in ops.iter().rev() {
            let Some(out_adj) = adjoints.map.get(&op.out.id()).cloned() else {
                continue;
            };
            (op.back)(&out_adj, &mut adjoints);
        }

        for t in self.touched.borrow().iter() {
            if !t.needs_grad() {
                continue;
            }
            match adjoints.map.get(&t.id()) {
                Some(adj) => t.accumulate_grad(adj),
                // Reached by no path: make sure a zero grad buffer exists.
                None => t.accumulate_grad(&vec![0.0; t.numel()]),
            }
        }
        if loss.needs_grad() && !self.seen.borrow().contains(&loss.id()) {
            t_accumulate_seed(loss);
        }
        Ok(())
    }
}

fn t_accumulate_seed(loss: &Tensor) {
    loss.accumulate_grad(&[1.0]);
}
