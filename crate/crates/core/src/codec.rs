//! The unified multimodal sequence format.
//!
//! One sequence interleaves discrete token slots (text bytes, special
//! markers, image codebook IDs offset into the joint vocabulary) with
//! continuous slots (adapted ViT vectors). Understanding sequences
//! look like
//!
//! ```text
//! [BOS][BOI]{image_d}[SEP]{image_c}[EOI]{prompt}{answer}[EOS]
//! ```
//!
//! and generation sequences put the text first, since an
//! autoregressive sampler has to see the condition before emitting
//! grid tokens:
//!
//! ```text
//! [BOS]{prompt}[BOI]{image_d}[EOI][EOS]
//! ```
//!
//! Loss masks mark supervised targets only: the answer plus final EOS
//! for understanding, the grid plus EOI and EOS for generation.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{usage_err, Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::vq::TokenGrid;

/// Byte-level text vocabulary: ids 0..256 are raw bytes.
pub const N_TEXT: usize = 256;

pub fn encode_text(s: &str) -> Vec<usize> {
    s.bytes().map(|b| b as usize).collect()
}

/// Lossy byte decoding; generated ids may not form valid UTF-8.
pub fn decode_text(ids: &[usize]) -> String {
    let bytes: Vec<u8> = ids.iter().map(|&i| i as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecialToken {
    Bos,
    Eos,
    Boi,
    Eoi,
    Sep,
    Uncond,
    Pad,
}

pub const SPECIAL_TOKENS: [SpecialToken; 7] = [
    SpecialToken::Bos,
    SpecialToken::Eos,
    SpecialToken::Boi,
    SpecialToken::Eoi,
    SpecialToken::Sep,
    SpecialToken::Uncond,
    SpecialToken::Pad,
];

impl SpecialToken {
    fn offset(self) -> usize {
        match self {
            SpecialToken::Bos => 0,
            SpecialToken::Eos => 1,
            SpecialToken::Boi => 2,
            SpecialToken::Eoi => 3,
            SpecialToken::Sep => 4,
            SpecialToken::Uncond => 5,
            SpecialToken::Pad => 6,
        }
    }
}

/// Contiguous id layout `[text | special | image-codebook]` shared by
/// the embedding table and the prediction head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JointVocabulary {
    pub n_text: usize,
    pub n_special: usize,
    pub n_image: usize,
}

impl JointVocabulary {
    pub fn new(n_image: usize) -> Self {
        Self {
            n_text: N_TEXT,
            n_special: SPECIAL_TOKENS.len(),
            n_image,
        }
    }

    pub fn total(&self) -> usize {
        self.n_text + self.n_special + self.n_image
    }

    pub fn special(&self, tok: SpecialToken) -> usize {
        self.n_text + tok.offset()
    }

    pub fn is_text(&self, id: usize) -> bool {
        id < self.n_text
    }

    pub fn is_special(&self, id: usize) -> bool {
        id >= self.n_text && id < self.n_text + self.n_special
    }

    pub fn is_image(&self, id: usize) -> bool {
        id >= self.n_text + self.n_special && id < self.total()
    }

    pub fn image_base(&self) -> usize {
        self.n_text + self.n_special
    }

    /// Codebook id -> joint id.
    pub fn image_to_joint(&self, codebook_id: usize) -> Result<usize> {
        if codebook_id >= self.n_image {
            return Err(usage_err!(
                "codebook id {codebook_id} out of image vocabulary {}",
                self.n_image
            ));
        }
        Ok(self.image_base() + codebook_id)
    }

    /// Joint id -> codebook id.
    pub fn joint_to_image(&self, joint: usize) -> Result<usize> {
        if !self.is_image(joint) {
            return Err(usage_err!("joint id {joint} is not an image token"));
        }
        Ok(joint - self.image_base())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Segment {
    Special,
    ImageD,
    ImageC,
    PromptText,
    AnswerText,
    GenImage,
}

impl Segment {
    pub fn name(self) -> &'static str {
        match self {
            Segment::Special => "special",
            Segment::ImageD => "image_d",
            Segment::ImageC => "image_c",
            Segment::PromptText => "prompt_text",
            Segment::AnswerText => "answer_text",
            Segment::GenImage => "gen_image",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SlotContent<T> {
    /// Joint-vocabulary token id.
    Discrete(usize),
    /// LM-width vector passed through the embedding layer unchanged.
    Continuous(Vec<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slot<T> {
    pub content: SlotContent<T>,
    pub segment: Segment,
    /// True iff this position is a supervised target. Continuous
    /// slots are never targets.
    pub loss_masked: bool,
}

impl<T> Slot<T> {
    fn discrete(id: usize, segment: Segment, loss_masked: bool) -> Self {
        Self {
            content: SlotContent::Discrete(id),
            segment,
            loss_masked,
        }
    }

    pub fn id(&self) -> Option<usize> {
        match self.content {
            SlotContent::Discrete(id) => Some(id),
            SlotContent::Continuous(_) => None,
        }
    }

    pub fn is_continuous(&self) -> bool {
        matches!(self.content, SlotContent::Continuous(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Understanding,
    Generation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalSequence<T> {
    pub slots: Vec<Slot<T>>,
    pub task: TaskKind,
}

impl<T: Real> MultimodalSequence<T> {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn mask_count(&self) -> usize {
        self.slots.iter().filter(|s| s.loss_masked).count()
    }

    pub fn continuous_count(&self) -> usize {
        self.slots.iter().filter(|s| s.is_continuous()).count()
    }

    /// Per-slot (target id, mask) arrays for the next-token loss.
    /// Continuous slots get a placeholder id; they are never masked.
    pub fn targets_and_mask(&self) -> (Vec<usize>, Vec<bool>) {
        let targets = self
            .slots
            .iter()
            .map(|s| s.id().unwrap_or(0))
            .collect();
        let mask = self.slots.iter().map(|s| s.loss_masked).collect();
        (targets, mask)
    }
}

/// Builds the understanding-task sequence. `cont` carries the adapted
/// continuous features as an [n, d] tensor; `None` assembles the
/// discrete-only (ablation baseline) layout without the SEP/image_c
/// block. The loss mask covers the answer tokens and the final EOS.
pub fn assemble_understanding<T: Real>(
    grid: &TokenGrid,
    cont: Option<&Tensor<T>>,
    prompt_ids: &[usize],
    answer_ids: &[usize],
    vocab: &JointVocabulary,
) -> Result<MultimodalSequence<T>> {
    if answer_ids.is_empty() {
        return Err(usage_err!("understanding assembly requires a non-empty answer"));
    }
    if prompt_ids.is_empty() {
        return Err(usage_err!("understanding assembly requires a non-empty prompt"));
    }
    check_text_ids(prompt_ids, vocab)?;
    check_text_ids(answer_ids, vocab)?;

    let mut slots = Vec::new();
    slots.push(Slot::discrete(vocab.special(SpecialToken::Bos), Segment::Special, false));
    slots.push(Slot::discrete(vocab.special(SpecialToken::Boi), Segment::Special, false));
    for &id in &grid.ids {
        slots.push(Slot::discrete(vocab.image_to_joint(id)?, Segment::ImageD, false));
    }
    if let Some(cont) = cont {
        slots.push(Slot::discrete(vocab.special(SpecialToken::Sep), Segment::Special, false));
        for i in 0..cont.rows() {
            slots.push(Slot {
                content: SlotContent::Continuous(cont.row(i).to_vec()),
                segment: Segment::ImageC,
                loss_masked: false,
            });
        }
    }
    slots.push(Slot::discrete(vocab.special(SpecialToken::Eoi), Segment::Special, false));
    for &id in prompt_ids {
        slots.push(Slot::discrete(id, Segment::PromptText, false));
    }
    for &id in answer_ids {
        slots.push(Slot::discrete(id, Segment::AnswerText, true));
    }
    slots.push(Slot::discrete(vocab.special(SpecialToken::Eos), Segment::Special, true));
    Ok(MultimodalSequence {
        slots,
        task: TaskKind::Understanding,
    })
}

/// Builds the generation-task sequence: text first, then the target
/// grid. An empty prompt becomes the UNCOND placeholder (the CFG
/// unconditional branch). Masked: grid ids, EOI, EOS.
pub fn assemble_generation<T: Real>(
    prompt_ids: &[usize],
    target_grid: &TokenGrid,
    vocab: &JointVocabulary,
) -> Result<MultimodalSequence<T>> {
    check_text_ids(prompt_ids, vocab)?;
    let mut slots = Vec::new();
    slots.push(Slot::discrete(vocab.special(SpecialToken::Bos), Segment::Special, false));
    if prompt_ids.is_empty() {
        slots.push(Slot::discrete(
            vocab.special(SpecialToken::Uncond),
            Segment::PromptText,
            false,
        ));
    } else {
        for &id in prompt_ids {
            slots.push(Slot::discrete(id, Segment::PromptText, false));
        }
    }
    slots.push(Slot::discrete(vocab.special(SpecialToken::Boi), Segment::Special, false));
    for &id in &target_grid.ids {
        slots.push(Slot::discrete(vocab.image_to_joint(id)?, Segment::GenImage, true));
    }
    slots.push(Slot::discrete(vocab.special(SpecialToken::Eoi), Segment::Special, true));
    slots.push(Slot::discrete(vocab.special(SpecialToken::Eos), Segment::Special, true));
    Ok(MultimodalSequence {
        slots,
        task: TaskKind::Generation,
    })
}

fn check_text_ids(ids: &[usize], vocab: &JointVocabulary) -> Result<()> {
    if let Some(&bad) = ids.iter().find(|&&i| i >= vocab.n_text) {
        return Err(usage_err!("text id {bad} out of byte vocabulary"));
    }
    Ok(())
}

/// The understanding-sequence prefix up through the prompt: what the
/// decoder conditions on before emitting answer tokens.
pub fn understanding_prefix<T: Real>(
    grid: &TokenGrid,
    cont: Option<&Tensor<T>>,
    prompt_ids: &[usize],
    vocab: &JointVocabulary,
) -> Result<Vec<Slot<T>>> {
    if prompt_ids.is_empty() {
        return Err(usage_err!("empty question"));
    }
    check_text_ids(prompt_ids, vocab)?;
    let mut slots = Vec::new();
    slots.push(Slot::discrete(vocab.special(SpecialToken::Bos), Segment::Special, false));
    slots.push(Slot::discrete(vocab.special(SpecialToken::Boi), Segment::Special, false));
    for &id in &grid.ids {
        slots.push(Slot::discrete(vocab.image_to_joint(id)?, Segment::ImageD, false));
    }
    if let Some(cont) = cont {
        slots.push(Slot::discrete(vocab.special(SpecialToken::Sep), Segment::Special, false));
        for i in 0..cont.rows() {
            slots.push(Slot {
                content: SlotContent::Continuous(cont.row(i).to_vec()),
                segment: Segment::ImageC,
                loss_masked: false,
            });
        }
    }
    slots.push(Slot::discrete(vocab.special(SpecialToken::Eoi), Segment::Special, false));
    for &id in prompt_ids {
        slots.push(Slot::discrete(id, Segment::PromptText, false));
    }
    Ok(slots)
}

/// The generation-sequence prefix through BOI: everything before the
/// grid tokens. An empty prompt yields the UNCOND placeholder.
pub fn generation_prefix<T: Real>(
    prompt_ids: &[usize],
    vocab: &JointVocabulary,
) -> Result<Vec<Slot<T>>> {
    check_text_ids(prompt_ids, vocab)?;
    let mut slots = Vec::new();
    slots.push(Slot::discrete(vocab.special(SpecialToken::Bos), Segment::Special, false));
    if prompt_ids.is_empty() {
        slots.push(Slot::discrete(
            vocab.special(SpecialToken::Uncond),
            Segment::PromptText,
            false,
        ));
    } else {
        for &id in prompt_ids {
            slots.push(Slot::discrete(id, Segment::PromptText, false));
        }
    }
    slots.push(Slot::discrete(vocab.special(SpecialToken::Boi), Segment::Special, false));
    Ok(slots)
}

/// Segments recovered from a sequence by [`parse`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Parsed {
    /// Codebook ids (de-offset) of the discrete image block.
    pub image_ids: Vec<usize>,
    pub continuous_count: usize,
    pub prompt_ids: Vec<usize>,
    /// Understanding answer bytes; empty for generation.
    pub answer_ids: Vec<usize>,
    /// Generation target codebook ids; empty for understanding.
    pub gen_ids: Vec<usize>,
    /// True when the generation prompt was the UNCOND placeholder.
    pub uncond: bool,
}

fn expect_special<T: Real>(
    seq: &MultimodalSequence<T>,
    pos: usize,
    tok: SpecialToken,
    vocab: &JointVocabulary,
) -> Result<()> {
    let want = vocab.special(tok);
    match seq.slots.get(pos) {
        Some(slot) if slot.id() == Some(want) => Ok(()),
        Some(slot) => Err(Error::Parse {
            position: pos,
            message: alloc::format!(
                "expected special {:?} (id {want}), found {:?}",
                tok,
                slot.id()
            ),
        }),
        None => Err(Error::Parse {
            position: pos,
            message: alloc::format!("sequence ended; expected {:?}", tok),
        }),
    }
}

/// Validates the special-token structure and recovers the segments.
/// `parse(assemble(x))` returns exactly the inputs of the assembly.
pub fn parse<T: Real>(seq: &MultimodalSequence<T>, vocab: &JointVocabulary) -> Result<Parsed> {
    match seq.task {
        TaskKind::Understanding => parse_understanding(seq, vocab),
        TaskKind::Generation => parse_generation(seq, vocab),
    }
}

fn parse_understanding<T: Real>(
    seq: &MultimodalSequence<T>,
    vocab: &JointVocabulary,
) -> Result<Parsed> {
    let mut pos = 0;
    expect_special(seq, pos, SpecialToken::Bos, vocab)?;
    pos += 1;
    expect_special(seq, pos, SpecialToken::Boi, vocab)?;
    pos += 1;

    let mut image_ids = Vec::new();
    while let Some(slot) = seq.slots.get(pos) {
        if slot.segment != Segment::ImageD {
            break;
        }
        let id = slot.id().ok_or(Error::Parse {
            position: pos,
            message: "continuous slot labeled image_d".into(),
        })?;
        image_ids.push(vocab.joint_to_image(id).map_err(|_| Error::Parse {
            position: pos,
            message: alloc::format!("id {id} not in image range"),
        })?);
        pos += 1;
    }
    if image_ids.is_empty() {
        return Err(Error::Parse {
            position: pos,
            message: "empty image_d block".into(),
        });
    }

    // SEP + continuous block is present unless assembled discrete-only.
    let mut continuous_count = 0;
    if seq
        .slots
        .get(pos)
        .and_then(|s| s.id())
        .is_some_and(|id| id == vocab.special(SpecialToken::Sep))
    {
        pos += 1;
        while let Some(slot) = seq.slots.get(pos) {
            if slot.segment != Segment::ImageC {
                break;
            }
            if !slot.is_continuous() {
                return Err(Error::Parse {
                    position: pos,
                    message: "discrete slot labeled image_c".into(),
                });
            }
            if slot.loss_masked {
                return Err(Error::Parse {
                    position: pos,
                    message: "continuous slot carries a loss mask".into(),
                });
            }
            continuous_count += 1;
            pos += 1;
        }
        if continuous_count == 0 {
            return Err(Error::Parse {
                position: pos,
                message: "SEP present but image_c block empty".into(),
            });
        }
    } else if seq.slots.get(pos).map(|s| s.segment) == Some(Segment::ImageC) {
        return Err(Error::Parse {
            position: pos,
            message: "image_c block without preceding SEP".into(),
        });
    }

    expect_special(seq, pos, SpecialToken::Eoi, vocab)?;
    pos += 1;

    let mut prompt_ids = Vec::new();
    while let Some(slot) = seq.slots.get(pos) {
        if slot.segment != Segment::PromptText {
            break;
        }
        prompt_ids.push(text_id(slot, pos, vocab)?);
        pos += 1;
    }
    let mut answer_ids = Vec::new();
    while let Some(slot) = seq.slots.get(pos) {
        if slot.segment != Segment::AnswerText {
            break;
        }
        answer_ids.push(text_id(slot, pos, vocab)?);
        pos += 1;
    }
    if prompt_ids.is_empty() || answer_ids.is_empty() {
        return Err(Error::Parse {
            position: pos,
            message: "missing prompt or answer text".into(),
        });
    }
    expect_special(seq, pos, SpecialToken::Eos, vocab)?;
    pos += 1;
    if pos != seq.len() {
        return Err(Error::Parse {
            position: pos,
            message: "trailing slots after EOS".into(),
        });
    }
    Ok(Parsed {
        image_ids,
        continuous_count,
        prompt_ids,
        answer_ids,
        gen_ids: Vec::new(),
        uncond: false,
    })
}

fn parse_generation<T: Real>(
    seq: &MultimodalSequence<T>,
    vocab: &JointVocabulary,
) -> Result<Parsed> {
    if seq.continuous_count() != 0 {
        let position = seq
            .slots
            .iter()
            .position(|s| s.is_continuous())
            .unwrap_or(0);
        return Err(Error::Parse {
            position,
            message: "generation sequence contains continuous slots".into(),
        });
    }
    let mut pos = 0;
    expect_special(seq, pos, SpecialToken::Bos, vocab)?;
    pos += 1;

    let mut prompt_ids = Vec::new();
    let mut uncond = false;
    let uncond_id = vocab.special(SpecialToken::Uncond);
    while let Some(slot) = seq.slots.get(pos) {
        if slot.segment != Segment::PromptText {
            break;
        }
        let id = slot.id().unwrap();
        if id == uncond_id {
            uncond = true;
        } else {
            prompt_ids.push(text_id(slot, pos, vocab)?);
        }
        pos += 1;
    }
    if prompt_ids.is_empty() && !uncond {
        return Err(Error::Parse {
            position: pos,
            message: "generation prompt empty without UNCOND placeholder".into(),
        });
    }
    expect_special(seq, pos, SpecialToken::Boi, vocab)?;
    pos += 1;

    let mut gen_ids = Vec::new();
    while let Some(slot) = seq.slots.get(pos) {
        if slot.segment != Segment::GenImage {
            break;
        }
        let id = slot.id().ok_or(Error::Parse {
            position: pos,
            message: "continuous slot labeled gen_image".into(),
        })?;
        gen_ids.push(vocab.joint_to_image(id).map_err(|_| Error::Parse {
            position: pos,
            message: alloc::format!("id {id} not in image range"),
        })?);
        pos += 1;
    }
    if gen_ids.is_empty() {
        return Err(Error::Parse {
            position: pos,
            message: "empty gen_image block".into(),
        });
    }
    expect_special(seq, pos, SpecialToken::Eoi, vocab)?;
    pos += 1;
    expect_special(seq, pos, SpecialToken::Eos, vocab)?;
    pos += 1;
    if pos != seq.len() {
        return Err(Error::Parse {
            position: pos,
            message: "trailing slots after EOS".into(),
        });
    }
    Ok(Parsed {
        image_ids: Vec::new(),
        continuous_count: 0,
        prompt_ids,
        answer_ids: Vec::new(),
        gen_ids,
        uncond,
    })
}

fn text_id<T: Real>(slot: &Slot<T>, pos: usize, vocab: &JointVocabulary) -> Result<usize> {
    match slot.id() {
        Some(id) if vocab.is_text(id) => Ok(id),
        other => Err(Error::Parse {
            position: pos,
            message: alloc::format!("expected text id, found {other:?}"),
        }),
    }
}

/// Recomputes the loss mask from segment labels alone. Fails if the
/// labels contradict the task.
pub fn build_loss_mask<T: Real>(seq: &MultimodalSequence<T>, task: TaskKind) -> Result<Vec<bool>> {
    let n = seq.len();
    let mut mask = alloc::vec![false; n];
    match task {
        TaskKind::Understanding => {
            for (i, slot) in seq.slots.iter().enumerate() {
                if slot.segment == Segment::GenImage {
                    return Err(usage_err!("gen_image slot {i} in an understanding sequence"));
                }
                if slot.segment == Segment::AnswerText {
                    mask[i] = true;
                }
            }
            // The closing EOS is supervised so decoding learns to stop.
            if n > 0 {
                mask[n - 1] = true;
            }
        }
        TaskKind::Generation => {
            let mut last_gen = None;
            for (i, slot) in seq.slots.iter().enumerate() {
                match slot.segment {
                    Segment::GenImage => {
                        mask[i] = true;
                        last_gen = Some(i);
                    }
                    Segment::ImageC | Segment::AnswerText => {
                        return Err(usage_err!(
                            "{} slot {i} in a generation sequence",
                            slot.segment.name()
                        ));
                    }
                    _ => {}
                }
            }
            let start = last_gen.ok_or_else(|| usage_err!("no gen_image block"))? + 1;
            for i in start..n {
                mask[i] = true; // EOI and EOS terminators
            }
        }
    }
    Ok(mask)
}
