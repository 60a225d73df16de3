//! Slot memory: an EMA-smoothed state pushed into a FIFO ring of M feature
//! maps, read back through per-position scaled dot-product attention.
//!
//! Updates are detached from the differentiation tape; gradients flow only
//! through attention reads of the current slice.

use std::collections::VecDeque;

use emstack_tensor::{Scalar, Tape, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ModelError, Result};
use crate::layers::Conv2dLayer;
use crate::params::ParamSet;

/// Ring of M slot maps plus the EMA aggregate they are snapshots of.
pub struct MemoryBank<T: Scalar> {
    slots: VecDeque<Tensor<T>>,
    ema: Option<Tensor<T>>,
    capacity: usize,
    alpha: f64,
}

impl<T: Scalar> MemoryBank<T> {
    pub fn new(capacity: usize, alpha: f64) -> Self {
        assert!(capacity >= 1, "memory bank needs at least one slot");
        assert!(alpha > 0.0 && alpha < 1.0, "momentum must lie in (0,1)");
        MemoryBank {
            slots: VecDeque::with_capacity(capacity),
            ema: None,
            capacity,
            alpha,
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Slots in age order, oldest first.
    pub fn slots(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.slots.iter()
    }

    pub fn ema_state(&self) -> Option<&Tensor<T>> {
        self.ema.as_ref()
    }

    /// EMA-smooth the new combined representation into the aggregate and push
    /// the result into the ring, evicting the oldest slot when full. The very
    /// first update adopts the input as the aggregate.
    pub fn update(&mut self, combined: &Tensor<T>) -> Result<()> {
        if let Some(prev) = &self.ema {
            if prev.shape() != combined.shape() {
                return Err(ModelError::Shape {
                    op: "bank_update",
                    lhs: prev.shape().to_vec(),
                    rhs: combined.shape().to_vec(),
                });
            }
        }
        let next = match &self.ema {
            None => combined.clone(),
            Some(prev) => {
                let a = T::from_f64(self.alpha);
                let keep = T::one() - a;
                let data = prev
                    .data()
                    .iter()
                    .zip(combined.data())
                    .map(|(&m, &f)| keep * m + a * f)
                    .collect();
                Tensor::from_vec(prev.shape(), data).expect("ema shape")
            }
        };
        self.slots.push_back(next.clone());
        if self.slots.len() > self.capacity {
            self.slots.pop_front();
        }
        self.ema = Some(next);
        Ok(())
    }

    pub fn reset(&mut self) {
        self.slots.clear();
        self.ema = None;
    }

    /// Named state for checkpoint serialization.
    pub fn state_entries(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        if let Some(ema) = &self.ema {
            out.push(("bank.ema".to_string(), ema.clone()));
        }
        for (i, s) in self.slots.iter().enumerate() {
            out.push((format!("bank.slot{i:02}"), s.clone()));
        }
        out
    }

    pub fn restore(&mut self, entries: &[(String, Tensor<T>)]) {
        self.reset();
        let mut slots: Vec<_> = entries
            .iter()
            .filter(|(n, _)| n.starts_with("bank.slot"))
            .collect();
        slots.sort_by(|a, b| a.0.cmp(&b.0));
        for (_, t) in slots {
            self.slots.push_back(t.clone());
        }
        self.ema = entries
            .iter()
            .find(|(n, _)| n == "bank.ema")
            .map(|(_, t)| t.clone());
    }
}

/// Projections around the bank: feature compression, mask encoding, the
/// q/k/v attention projections and the expansion back to feature width.
pub struct MemoryModule {
    pub proj: Conv2dLayer,       // 1x1, C -> d
    pub mask_conv1: Conv2dLayer, // 3x3 stride 2, 1 -> d
    pub mask_conv2: Conv2dLayer, // 3x3 stride 2, d -> d
    pub q_proj: Conv2dLayer,     // 1x1, d -> d
    pub k_proj: Conv2dLayer,
    pub v_proj: Conv2dLayer,
    pub out_proj: Conv2dLayer, // 1x1, d -> C
    pub channels: usize,
    pub mem_channels: usize,
}

impl MemoryModule {
    pub fn build<T: Scalar>(
        tape: &mut Tape<T>,
        params: &mut ParamSet,
        channels: usize,
        mem_channels: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, d) = (channels, mem_channels);
        MemoryModule {
            proj: Conv2dLayer::new(tape, params, "memory.proj", c, d, 1, 1, 0, false, &mut rng),
            mask_conv1: Conv2dLayer::new(tape, params, "memory.mask_conv1", 1, d, 3, 2, 1, false, &mut rng),
            mask_conv2: Conv2dLayer::new(tape, params, "memory.mask_conv2", d, d, 3, 2, 1, false, &mut rng),
            q_proj: Conv2dLayer::new(tape, params, "memory.q_proj", d, d, 1, 1, 0, false, &mut rng),
            k_proj: Conv2dLayer::new(tape, params, "memory.k_proj", d, d, 1, 1, 0, false, &mut rng),
            v_proj: Conv2dLayer::new(tape, params, "memory.v_proj", d, d, 1, 1, 0, false, &mut rng),
            out_proj: Conv2dLayer::new(tape, params, "memory.out_proj", d, c, 1, 1, 0, false, &mut rng),
            channels,
            mem_channels,
        }
    }

    /// 1×1 channel reduction C → d.
    pub fn project_features<T: Scalar>(&self, tape: &mut Tape<T>, f: Var) -> Result<Var> {
        let shape = tape.data(f).shape().to_vec();
        if shape.len() != 3 || shape[0] < self.mem_channels {
            return Err(TensorError::BadShape {
                op: "project_features",
                shape,
                msg: format!("needs [C,H,W] with C >= {}", self.mem_channels),
            }
            .into());
        }
        self.proj.forward(tape, f)
    }

    /// Two stride-2 conv+ReLU layers, then bilinear alignment to (th, tw).
    pub fn encode_mask<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        mask: Var,
        th: usize,
        tw: usize,
    ) -> Result<Var> {
        let x = self.mask_conv1.forward(tape, mask)?;
        let x = tape.relu(x)?;
        let x = self.mask_conv2.forward(tape, x)?;
        let x = tape.relu(x)?;
        Ok(tape.bilinear_resize(x, th, tw)?)
    }

    /// Additive combination of projected features and the encoded previous
    /// mask; this is the representation the bank smooths (F_t).
    pub fn combine<T: Scalar>(&self, tape: &mut Tape<T>, feats: Var, prev_mask: Var) -> Result<Var> {
        let shape = tape.data(feats).shape().to_vec();
        let (th, tw) = (shape[1], shape[2]);
        let p = self.project_features(tape, feats)?;
        let m = self.encode_mask(tape, prev_mask, th, tw)?;
        Ok(tape.add(p, m)?)
    }

    /// Memory read: per-position softmax(QKᵀ/√d)V over the bank slots, added
    /// residually to the combined representation. An empty bank is the
    /// identity.
    pub fn attend<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        combined: Var,
        bank: &MemoryBank<T>,
    ) -> Result<Var> {
        if bank.is_empty() {
            return Ok(combined);
        }
        let shape = tape.data(combined).shape().to_vec();
        for slot in bank.slots() {
            if slot.shape() != shape.as_slice() {
                return Err(TensorError::DimMismatch {
                    op: "attend",
                    lhs: shape,
                    rhs: slot.shape().to_vec(),
                }
                .into());
            }
        }
        let q = self.q_proj.forward(tape, combined)?;
        let mut keys = Vec::with_capacity(bank.len());
        let mut values = Vec::with_capacity(bank.len());
        for slot in bank.slots() {
            let s = tape.constant(slot.clone());
            keys.push(self.k_proj.forward(tape, s)?);
            values.push(self.v_proj.forward(tape, s)?);
        }
        let att = tape.slot_attention(q, &keys, &values)?;
        Ok(tape.add(att, combined)?)
    }

    /// Expand the conditioned representation back to feature width and add it
    /// to the enhanced features.
    pub fn expand_into<T: Scalar>(&self, tape: &mut Tape<T>, conditioned: Var, feats: Var) -> Result<Var> {
        let e = self.out_proj.forward(tape, conditioned)?;
        Ok(tape.add(feats, e)?)
    }
}
