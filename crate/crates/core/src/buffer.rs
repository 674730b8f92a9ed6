//! Bounded, time-ordered cache of featurized exemplars.
//!
//! The buffer holds `beta_max` slots, oldest first. Refresh frames push a new
//! exemplar and evict the oldest. Distractor injection overrides slot
//! *positions*: an injected position keeps showing its distractor while the
//! genuine exemplars continue to flow through the FIFO underneath, so a
//! requested pollution level stays constant for the whole run.

use std::collections::VecDeque;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const DEFAULT_BETA_MAX: usize = 4;
pub const DEFAULT_XI: usize = 5;

#[derive(Clone, Debug, PartialEq)]
struct Entry<T> {
    features: Arc<Tensor<T>>,
    frame_index: usize,
    scheduled: bool,
}

/// A slot as seen by the matcher.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotView<'a, T> {
    pub features: &'a Tensor<T>,
    /// Frame the genuine exemplar at this position came from.
    pub frame_index: usize,
    pub injected: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExemplarBuffer<T: Element = f32> {
    entries: VecDeque<Entry<T>>,
    overlay: Vec<Option<Arc<Tensor<T>>>>,
    beta_max: usize,
    xi: usize,
}

/// True iff `frame_index > 0` and `frame_index` is a multiple of `xi`.
pub fn is_refresh_frame(frame_index: usize, xi: usize) -> bool {
    xi > 0 && frame_index > 0 && frame_index % xi == 0
}

/// Slot positions polluted for a distractor percentage: the newest
/// `percentage·beta_max/100` positions.
pub fn distractor_slots(percentage: u32, beta_max: usize) -> Result<Vec<usize>> {
    let scaled = percentage as usize * beta_max;
    if percentage >= 100 || scaled % 100 != 0 {
        return Err(Error::config(
            "percentage",
            format!("{percentage}% is not a whole number of slots below {beta_max}"),
        ));
    }
    let k = scaled / 100;
    Ok((beta_max - k..beta_max).collect())
}

impl<T: Element> ExemplarBuffer<T> {
    /// Fills all `beta_max` slots with the initialization exemplar at frame 0.
    pub fn init(first_exemplar: Tensor<T>, beta_max: usize, xi: usize) -> Result<Self> {
        if beta_max < 1 {
            return Err(Error::config("beta_max", "must be at least 1"));
        }
        if xi < 1 {
            return Err(Error::config("xi", "must be at least 1"));
        }
        let features = Arc::new(first_exemplar.with_requires_grad(false));
        let entries = (0..beta_max)
            .map(|_| Entry {
                features: features.clone(),
                frame_index: 0,
                scheduled: true,
            })
            .collect();
        Ok(Self {
            entries,
            overlay: vec![None; beta_max],
            beta_max,
            xi,
        })
    }

    pub fn beta_max(&self) -> usize {
        self.beta_max
    }

    pub fn xi(&self) -> usize {
        self.xi
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn slot_shape(&self) -> &[usize] {
        self.entries[0].features.shape()
    }

    /// Evicts the oldest exemplar and appends `features` as the newest.
    pub fn push(&mut self, features: Tensor<T>, frame_index: usize) -> Result<()> {
        self.push_entry(features, frame_index, is_refresh_frame(frame_index, self.xi))
    }

    fn push_entry(&mut self, features: Tensor<T>, frame_index: usize, scheduled: bool) -> Result<()> {
        if features.shape() != self.slot_shape() {
            return Err(Error::shape("buffer push", self.slot_shape(), features.shape()));
        }
        self.entries.pop_front();
        self.entries.push_back(Entry {
            features: Arc::new(features.with_requires_grad(false)),
            frame_index,
            scheduled,
        });
        Ok(())
    }

    /// Overrides the given positions (0 = oldest) with distractor features.
    pub fn inject_distractor(&mut self, slot_indices: &[usize], distractors: &[Tensor<T>]) -> Result<()> {
        if slot_indices.len() != distractors.len() {
            return Err(Error::invalid(format!(
                "{} slot indices but {} distractors",
                slot_indices.len(),
                distractors.len()
            )));
        }
        for (&i, d) in slot_indices.iter().zip(distractors) {
            if i >= self.beta_max {
                return Err(Error::invalid(format!(
                    "slot index {i} out of range for a buffer of {}",
                    self.beta_max
                )));
            }
            if d.shape() != self.slot_shape() {
                return Err(Error::shape("inject_distractor", self.slot_shape(), d.shape()));
            }
        }
        for (&i, d) in slot_indices.iter().zip(distractors) {
            self.overlay[i] = Some(Arc::new(d.clone().with_requires_grad(false)));
        }
        Ok(())
    }

    pub fn clear_injections(&mut self) {
        self.overlay.iter_mut().for_each(|o| *o = None);
    }

    pub fn slots(&self) -> impl Iterator<Item = SlotView<'_, T>> {
        self.entries.iter().zip(&self.overlay).map(|(e, o)| SlotView {
            features: o.as_deref().unwrap_or(&e.features),
            frame_index: e.frame_index,
            injected: o.is_some(),
        })
    }

    pub fn frame_indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.frame_index).collect()
    }

    pub fn injected_mask(&self) -> Vec<bool> {
        self.overlay.iter().map(Option::is_some).collect()
    }

    /// Channel concatenation of the visible slots, oldest first.
    pub fn as_stack(&self) -> Tensor<T> {
        let parts: Vec<&Tensor<T>> = self.slots().map(|s| s.features).collect();
        Tensor::concat_channels(&parts).expect("slot shapes are uniform")
    }

    /// Whether every pair of adjacent, non-injected, schedule-pushed slots
    /// is exactly `xi` frames apart. Bootstrap slots (frame 0) count as the
    /// start of the schedule.
    pub fn satisfies_spacing(&self) -> bool {
        let visible: Vec<&Entry<T>> = self
            .entries
            .iter()
            .zip(&self.overlay)
            .filter(|(e, o)| o.is_none() && e.scheduled)
            .map(|(e, _)| e)
            .collect();
        visible.windows(2).all(|w| {
            let (a, b) = (w[0].frame_index, w[1].frame_index);
            (a == 0 && b == 0) || b == a + self.xi
        })
    }
}
