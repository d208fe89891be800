//! Reverse-mode differentiation tape.
//!
//! Operations record themselves in forward order; `backward` replays their
//! gradient rules in reverse. A tape is consumed by its backward pass —
//! calling it twice is an error rather than a silent double-accumulation.

use std::collections::HashSet;

use crate::error::{KforgeError, Result};
use crate::ops::Op;
use crate::tensor::Tensor;

pub struct Tape {
    ops: Vec<Op>,
    out_ids: HashSet<u64>,
    recording: bool,
    consumed: bool,
}

impl Tape {
    /// A tape that records every operation run against it.
    pub fn recording() -> Tape {
        Tape {
            ops: Vec::new(),
            out_ids: HashSet::new(),
            recording: true,
            consumed: false,
        }
    }

    /// A no-op tape for pure inference; nothing is recorded.
    pub fn inference() -> Tape {
        Tape {
            ops: Vec::new(),
            out_ids: HashSet::new(),
            recording: false,
            consumed: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    pub(crate) fn push(&mut self, op: Op) {
        debug_assert!(self.recording);
        for out in op.outputs() {
            self.out_ids.insert(out.id());
        }
        self.ops.push(op);
    }

    /// True when `t` requires a gradient or was produced by an op on this
    /// tape (an intermediate the chain rule must pass through).
    pub(crate) fn needs_grad(&self, t: &Tensor) -> bool {
        t.requires_grad() || self.out_ids.contains(&t.id())
    }

    /// Run the chain rule from `loss` back to every reachable tensor with
    /// `requires_grad`. Gradients sum across fan-out and across repeated
    /// backward passes of *different* tapes; this tape is consumed.
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        if self.consumed {
            return Err(KforgeError::TapeConsumed);
        }
        if !loss.is_scalar() {
            return Err(KforgeError::NonScalarLoss(loss.shape()));
        }
        if !self.out_ids.contains(&loss.id()) {
            return Err(KforgeError::LossNotOnTape);
        }
        self.consumed = true;
        loss.accumulate_grad(&[1.0]);
        for i in (0..self.ops.len()).rev() {
            // Split borrow: the op reads tape state only through needs_grad.
            let op = std::mem::replace(&mut self.ops[i], Op::Noop);
            op.backward(self);
        }
        self.ops.clear();
        Ok(())
    }
}
