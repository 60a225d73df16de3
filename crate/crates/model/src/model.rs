//! The assembled slice-segmentation model and its per-slice pipeline:
//! encode → enhance → memory conditioning → prompt from the previous final
//! mask → stage-1 decode → refined prompt from the stage-1 hint → stage-2
//! decode → full-resolution probabilities.
//!
//! The loop is bi-directional across slices: stage-2 output prompts the NEXT
//! slice's first prompt encoder, while stage-1 output prompts THIS slice's
//! second prompt encoder. Memory updates and mask chaining are detached, so
//! each slice owns a bounded differentiation graph.

use std::collections::BTreeMap;
use std::path::Path;

use emstack_tensor::{Scalar, Tape, TapeMark, Tensor, TensorError, Var};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, EntryKind, OwnedEntry};
use crate::config::{AblationFlags, ModelConfig};
use crate::decoder::{DecoderStage1, DecoderStage2};
use crate::encoder::Encoder;
use crate::enhancer::Enhancer;
use crate::error::{ModelError, Result};
use crate::layers::NormMode;
use crate::memory::{MemoryBank, MemoryModule};
use crate::optim::AdamW;
use crate::params::ParamSet;
use crate::prompt::PromptEncoder;

/// Per-slice carry state: previous final mask, slice index, memory bank.
pub struct SliceState<T: Scalar> {
    pub prev_mask: Tensor<T>,
    pub slice_index: usize,
    pub bank: MemoryBank<T>,
}

impl<T: Scalar> SliceState<T> {
    /// Cold start: all-zero previous mask, empty bank.
    pub fn fresh(cfg: &ModelConfig, h: usize, w: usize) -> Self {
        SliceState {
            prev_mask: Tensor::zeros(&[1, h, w]),
            slice_index: 0,
            bank: MemoryBank::new(cfg.memory_slots, cfg.memory_momentum),
        }
    }
}

/// Data-lineage record of what actually fed the prompt encoders.
pub struct SliceTrace<T: Scalar> {
    pub prompt1_input: Tensor<T>,
    pub prompt2_input: Option<Tensor<T>>,
}

/// Tape handles produced for one slice.
pub struct SliceStep<T: Scalar> {
    pub final_logits: Var,
    pub final_probs: Var,
    /// Quarter-resolution stage-1 logits (also the only stage when the
    /// bi-directional loop is ablated).
    pub stage1_logits: Var,
    pub sparse_tokens: usize,
    pub trace: SliceTrace<T>,
}

pub struct SliceModel<T: Scalar> {
    pub cfg: ModelConfig,
    pub flags: AblationFlags,
    pub encoder: Encoder,
    pub enhancer: Enhancer<T>,
    pub memory: MemoryModule,
    pub prompt1: PromptEncoder,
    pub prompt2: PromptEncoder,
    pub stage1: DecoderStage1,
    pub stage2: DecoderStage2,
    params: ParamSet,
    base_mark: TapeMark,
}

impl<T: Scalar> SliceModel<T> {
    pub fn build(
        tape: &mut Tape<T>,
        cfg: ModelConfig,
        flags: AblationFlags,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let c = cfg.feature_channels;
        let encoder = Encoder::build(tape, &mut params, &cfg, seed ^ 0x01);
        let enhancer = Enhancer::build(tape, &mut params, c, seed ^ 0x02);
        let memory = MemoryModule::build(tape, &mut params, c, cfg.memory_channels, seed ^ 0x03);
        let prompt1 = PromptEncoder::build(
            tape,
            &mut params,
            "prompt1",
            c,
            cfg.prompt_max_components,
            seed ^ 0x04,
        );
        let prompt2 = PromptEncoder::build(
            tape,
            &mut params,
            "prompt2",
            c,
            cfg.prompt_max_components,
            seed ^ 0x05,
        );
        let stage1 = DecoderStage1::build(
            tape,
            &mut params,
            c,
            cfg.decoder_heads,
            cfg.decoder_blocks,
            seed ^ 0x06,
        );
        let stage2 = DecoderStage2::build(
            tape,
            &mut params,
            c,
            cfg.decoder_heads,
            cfg.decoder_blocks,
            seed ^ 0x07,
        );
        let base_mark = tape.mark();
        Ok(SliceModel {
            cfg,
            flags,
            encoder,
            enhancer,
            memory,
            prompt1,
            prompt2,
            stage1,
            stage2,
            params,
            base_mark,
        })
    }

    /// Tape position right after parameter construction; roll back to here
    /// between passes.
    pub fn base_mark(&self) -> TapeMark {
        self.base_mark
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Trainable tensors (the LoRA bypasses plus all downstream modules).
    pub fn trainable_parameters(&self) -> Vec<Var> {
        self.params.trainable().map(|e| e.var).collect()
    }

    /// Parameters that participate in forward passes under the current
    /// ablation flags; disabled components stay out of the optimizer.
    pub fn active_params(&self) -> Vec<crate::params::ParamEntry> {
        self.params
            .entries()
            .iter()
            .filter(|e| {
                if !self.flags.enhancer && e.name.starts_with("enhancer.") {
                    return false;
                }
                if !self.flags.memory
                    && (e.name.starts_with("memory.q_proj")
                        || e.name.starts_with("memory.k_proj")
                        || e.name.starts_with("memory.v_proj"))
                {
                    return false;
                }
                if !self.flags.bidirectional
                    && (e.name.starts_with("stage2.") || e.name.starts_with("prompt2."))
                {
                    return false;
                }
                true
            })
            .cloned()
            .collect()
    }

    pub fn buffers(&self) -> Vec<(String, Vec<T>)> {
        self.enhancer.buffers()
    }

    pub fn set_buffer(&mut self, name: &str, data: &[T]) -> bool {
        self.enhancer.set_buffer(name, data)
    }

    /// Run the full per-slice pipeline, updating `state` for the next slice.
    pub fn segment_slice(
        &mut self,
        tape: &mut Tape<T>,
        image: &Tensor<T>,
        state: &mut SliceState<T>,
        mode: NormMode,
    ) -> Result<SliceStep<T>> {
        let shape = image.shape().to_vec();
        if shape.len() != 3 || shape[0] != 1 {
            return Err(TensorError::BadShape {
                op: "segment_slice",
                shape,
                msg: "expects a [1,H,W] slice".into(),
            }
            .into());
        }
        if state.prev_mask.shape() != image.shape() {
            return Err(ModelError::Shape {
                op: "segment_slice: prev mask vs image",
                lhs: state.prev_mask.shape().to_vec(),
                rhs: shape,
            });
        }
        let (h, w) = (shape[1], shape[2]);
        let image_var = tape.constant(image.clone());

        // Encoder + enhancer.
        let ms = self.encoder.encode(tape, image_var, true)?;
        let enhanced = if self.flags.enhancer {
            self.enhancer.enhance(tape, ms.f4, ms.f8, ms.f16, mode)?
        } else {
            ms.f4
        };

        // Memory conditioning on the combined feature+mask representation.
        let prev_mask_var = tape.constant(state.prev_mask.clone());
        let combined = self.memory.combine(tape, enhanced, prev_mask_var)?;
        let conditioned = if self.flags.memory {
            self.memory.attend(tape, combined, &state.bank)?
        } else {
            combined
        };
        let img_feat = self.memory.expand_into(tape, conditioned, enhanced)?;

        // Prompt 1: previous slice's final mask (zero when the loop is off).
        let (p1_input_var, p1_trace) = if self.flags.bidirectional {
            (prev_mask_var, state.prev_mask.clone())
        } else {
            let zero = Tensor::zeros(&[1, h, w]);
            (tape.constant(zero.clone()), zero)
        };
        let p1 = self.prompt1.encode(tape, p1_input_var)?;
        let s1 = self.stage1.forward(tape, img_feat, &p1)?;

        // Stage 2 behind the refined prompt, or the upsampled single-stage
        // path when the loop is ablated.
        let (final_logits, p2_trace, sparse_tokens) = if self.flags.bidirectional {
            let hint_logits = tape.bilinear_resize(s1.logits, h, w)?;
            let hint = tape.sigmoid(hint_logits)?;
            let p2 = self.prompt2.encode(tape, hint)?;
            let logits2 = self.stage2.forward(tape, img_feat, &p2, &s1)?;
            (
                logits2,
                Some(tape.detach(hint)),
                p1.token_count.max(p2.token_count),
            )
        } else {
            let up = tape.bilinear_resize(s1.logits, h, w)?;
            (up, None, p1.token_count)
        };
        let final_probs = tape.sigmoid(final_logits)?;

        // Detached state carry: EMA/ring update and the self-prompt chain.
        if self.flags.memory {
            state.bank.update(&tape.detach(combined))?;
        }
        state.prev_mask = tape.detach(final_probs);
        state.slice_index += 1;

        Ok(SliceStep {
            final_logits,
            final_probs,
            stage1_logits: s1.logits,
            sparse_tokens,
            trace: SliceTrace {
                prompt1_input: p1_trace,
                prompt2_input: p2_trace,
            },
        })
    }

    // ── Checkpointing ───────────────────────────────────────────────

    pub fn state_entries(&self, tape: &Tape<T>) -> Vec<OwnedEntry<T>> {
        let mut out = Vec::new();
        for e in self.params.entries() {
            let t = tape.data(e.var);
            out.push(OwnedEntry::new(
                e.name.clone(),
                t.shape(),
                t.data().to_vec(),
                e.frozen,
                EntryKind::Param,
            ));
        }
        for (name, data) in self.buffers() {
            let shape = vec![data.len()];
            out.push(OwnedEntry::new(name, &shape, data, true, EntryKind::Buffer));
        }
        out
    }

    /// Copy named entries into this model; every model tensor must be
    /// present in the checkpoint.
    pub fn apply_entries(&mut self, tape: &mut Tape<T>, ckpt: &Checkpoint<T>) -> Result<()> {
        for e in self.params.entries() {
            let found = ckpt.find(&e.name).ok_or_else(|| {
                ModelError::Checkpoint(format!("missing parameter {} in checkpoint", e.name))
            })?;
            let target = tape.data_mut(e.var);
            if target.shape() != found.shape.as_slice() {
                return Err(ModelError::Checkpoint(format!(
                    "shape mismatch for {}: model {:?} vs checkpoint {:?}",
                    e.name,
                    target.shape(),
                    found.shape
                )));
            }
            target.data_mut().copy_from_slice(&found.data);
        }
        let buffer_names: Vec<String> =
            self.buffers().into_iter().map(|(name, _)| name).collect();
        for name in buffer_names {
            let found = ckpt.find(&name).ok_or_else(|| {
                ModelError::Checkpoint(format!("missing buffer {name} in checkpoint"))
            })?;
            self.set_buffer(&name, &found.data);
        }
        Ok(())
    }
}

/// Write model (+ optional optimizer) state with metadata.
pub fn save_model<T: Scalar>(
    path: &Path,
    tape: &Tape<T>,
    model: &SliceModel<T>,
    optimizer: Option<&AdamW<T>>,
    extra_meta: &BTreeMap<String, String>,
) -> Result<()> {
    let mut entries = model.state_entries(tape);
    if let Some(opt) = optimizer {
        for (name, data) in opt.state_entries() {
            let shape = vec![data.len()];
            entries.push(OwnedEntry::new(name, &shape, data, false, EntryKind::Optim));
        }
    }
    let mut meta = extra_meta.clone();
    meta.insert(
        "model_config".to_string(),
        serde_json::to_string(&model.cfg)
            .map_err(|e| ModelError::Checkpoint(format!("config encode: {e}")))?,
    );
    meta.insert(
        "ablation".to_string(),
        serde_json::to_string(&model.flags)
            .map_err(|e| ModelError::Checkpoint(format!("flags encode: {e}")))?,
    );
    if let Some(opt) = optimizer {
        meta.insert("optim_step".to_string(), opt.step.to_string());
    }
    save_checkpoint(path, &meta, &entries)
}

/// Rebuild a model from a checkpoint's embedded config and load its weights.
pub fn load_model<T: Scalar>(
    path: &Path,
    tape: &mut Tape<T>,
) -> Result<(SliceModel<T>, Checkpoint<T>)> {
    let ckpt = load_checkpoint::<T>(path)?;
    let cfg: ModelConfig = serde_json::from_str(
        ckpt.meta
            .get("model_config")
            .ok_or_else(|| ModelError::Checkpoint("checkpoint lacks model_config".into()))?,
    )
    .map_err(|e| ModelError::Checkpoint(format!("config decode: {e}")))?;
    let flags: AblationFlags = match ckpt.meta.get("ablation") {
        Some(s) => serde_json::from_str(s)
            .map_err(|e| ModelError::Checkpoint(format!("flags decode: {e}")))?,
        None => AblationFlags::default(),
    };
    let mut model = SliceModel::build(tape, cfg, flags, 0)?;
    model.apply_entries(tape, &ckpt)?;
    Ok((model, ckpt))
}
