//! Bounded first-in first-out store of past feature maps.

use std::collections::VecDeque;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Anything with a tensor shape that can be queued.
pub trait Shaped {
    fn dims(&self) -> &[usize];
}

impl<T: Scalar> Shaped for Var<T> {
    fn dims(&self) -> &[usize] {
        self.shape()
    }
}

impl<T: Scalar> Shaped for Tensor<T> {
    fn dims(&self) -> &[usize] {
        self.shape()
    }
}

#[derive(Clone, Debug)]
pub struct HistoryQueue<E> {
    capacity: usize,
    stage: usize,
    entries: VecDeque<E>,
}

impl<E: Shaped + Clone> HistoryQueue<E> {
    pub fn new(capacity: usize, stage: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::arg("history capacity must be positive"));
        }
        Ok(Self { capacity, stage, entries: VecDeque::with_capacity(capacity + 1) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Append `entry`, evicting the oldest when full.
    pub fn push(&mut self, entry: E) -> Result<()> {
        if let Some(first) = self.entries.front() {
            if first.dims() != entry.dims() {
                return Err(Error::shape(format!(
                    "history queue of stage {} holds {:?}, got {:?}",
                    self.stage,
                    first.dims(),
                    entry.dims()
                )));
            }
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
        Ok(())
    }

    /// The `tau` most recent entries, oldest first. With fewer entries stored, the
    /// earliest one is repeated at the front.
    pub fn view(&self, tau: usize) -> Result<Vec<E>> {
        if tau == 0 || tau > self.capacity {
            return Err(Error::arg(format!("history length {tau} outside 1..={}", self.capacity)));
        }
        let first = self
            .entries
            .front()
            .ok_or_else(|| Error::arg(format!("history queue of stage {} is empty", self.stage)))?;
        let have = self.entries.len();
        let mut out = Vec::with_capacity(tau);
        out.extend(std::iter::repeat_n(first, tau.saturating_sub(have)).cloned());
        out.extend(self.entries.iter().skip(have.saturating_sub(tau)).cloned());
        Ok(out)
    }

    pub fn iter(&self) -> impl Iterator<Item = &E> {
        self.entries.iter()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// Stacked history `[tau, c, h, w]`, oldest first.
#[derive(Clone)]
pub struct HistoryView<T: Scalar> {
    pub h: Var<T>,
}

impl<T: Scalar> HistoryView<T> {
    pub fn tau(&self) -> usize {
        self.h.shape()[0]
    }

    /// `tau` copies of `f`, the view used before any history exists.
    pub fn replicate(f: &Var<T>, tau: usize) -> Result<Self> {
        if tau == 0 {
            return Err(Error::arg("history length must be positive"));
        }
        Ok(Self { h: Var::stack(&vec![f.clone(); tau])? })
    }

    pub fn from_frames(frames: &[Var<T>]) -> Result<Self> {
        Ok(Self { h: Var::stack(frames)? })
    }
}

pub fn history_view<T: Scalar>(q: &HistoryQueue<Var<T>>, tau: usize) -> Result<HistoryView<T>> {
    HistoryView::from_frames(&q.view(tau)?)
}
