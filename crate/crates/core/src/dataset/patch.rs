use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::degrade::{self, DegradationConfig};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Uniformly placed `patch x patch` crop of an HR image and its mask.
pub fn sample_patch(hr: &Tensor, mask: Option<&Tensor>, patch: usize, r: &mut Rng) -> Result<(Tensor, Option<Tensor>)> {
    let [_, _, h, w] = hr.shape();
    if patch == 0 || patch % degrade::FACTOR != 0 {
        return Err(Error::invalid(format!("patch {patch} must be a positive multiple of 4")));
    }
    if patch > h.min(w) {
        return Err(Error::invalid(format!("patch {patch} larger than {h}x{w} image")));
    }
    if let Some(m) = mask {
        let [_, _, mh, mw] = m.shape();
        if (mh, mw) != (h, w) {
            return Err(Error::invalid("mask and image extents differ"));
        }
    }
    let y0 = r.random_range(0..=h - patch);
    let x0 = r.random_range(0..=w - patch);
    let hp = hr.crop(y0, x0, patch, patch)?;
    let mp = mask.map(|m| m.crop(y0, x0, patch, patch)).transpose()?;
    Ok((hp, mp))
}

/// One branch's minibatch. `mask` is present only for blur data.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub lr: Tensor,
    pub hr: Tensor,
    pub mask: Option<Tensor>,
}

/// Endless stream of degraded training patches from an in-memory pool.
///
/// Samples are visited in a fresh shuffled order every epoch, so running
/// out of data never fails. Every random choice is keyed by
/// `(seed, tag, counter)`.
#[derive(Clone, Debug)]
pub struct PatchSource {
    items: Vec<(Tensor, Option<Tensor>)>,
    patch: usize,
    degradation: DegradationConfig,
    seed: u64,
    tag: String,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    draws: u64,
}

impl PatchSource {
    pub fn new(
        items: Vec<(Tensor, Option<Tensor>)>,
        patch: usize,
        degradation: DegradationConfig,
        seed: u64,
        tag: impl Into<String>,
    ) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::invalid("patch source needs at least one sample"));
        }
        let with_mask = items[0].1.is_some();
        if items.iter().any(|(_, m)| m.is_some() != with_mask) {
            return Err(Error::invalid("either every sample has a mask or none does"));
        }
        for (hr, _) in &items {
            let [n, c, h, w] = hr.shape();
            if n != 1 || c != 3 || patch > h.min(w) {
                return Err(Error::invalid(format!(
                    "sample {:?} cannot provide {patch}px patches",
                    hr.shape()
                )));
            }
        }
        degradation.validate()?;
        let mut s = Self {
            items,
            patch,
            degradation,
            seed,
            tag: tag.into(),
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
            draws: 0,
        };
        s.reshuffle();
        Ok(s)
    }

    pub fn has_masks(&self) -> bool {
        self.items[0].1.is_some()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.items.len()).collect();
        self.order
            .shuffle(&mut rng::stream(self.seed, &format!("{}/epoch", self.tag), self.epoch));
        self.cursor = 0;
    }

    fn next_index(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let i = self.order[self.cursor];
        self.cursor += 1;
        i
    }

    pub fn next_batch(&mut self, n: usize) -> Result<Batch> {
        if n == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        let mut lrs = Vec::with_capacity(n);
        let mut hrs = Vec::with_capacity(n);
        let mut masks = Vec::with_capacity(n);
        for _ in 0..n {
            let i = self.next_index();
            let mut r = rng::stream(self.seed, &format!("{}/draw", self.tag), self.draws);
            self.draws += 1;
            let (hr, mask) = &self.items[i];
            let (hp, mp) = sample_patch(hr, mask.as_ref(), self.patch, &mut r)?;
            lrs.push(degrade::degrade(&hp, &self.degradation, &mut r)?);
            hrs.push(hp);
            if let Some(m) = mp {
                masks.push(m);
            }
        }
        Ok(Batch {
            lr: Tensor::stack(&lrs)?,
            hr: Tensor::stack(&hrs)?,
            mask: if masks.is_empty() {
                None
            } else {
                Some(Tensor::stack(&masks)?)
            },
        })
    }
}
