//! The decoder-only transformer over the joint vocabulary.
//!
//! Discrete slots are embedded by table lookup; continuous slots pass
//! through unchanged (they already live in LM width after the
//! adapter). One embedding table, one prediction head, no
//! task-conditional parameters anywhere: the same stack scores text
//! answers and image grids.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::codec::{JointVocabulary, MultimodalSequence, Segment, SlotContent};
use crate::error::{shape_err, usage_err, Result};
use crate::image::Image;
use crate::kernels as kn;
use crate::nn::{Activation, Block, LayerNorm, Linear, ParamList};
use crate::optim::{ParamGroup, ParamSet};
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vit::{select_grid, VisionEncoder, VitConfig};

#[derive(Debug, Clone)]
pub struct LmConfig {
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub context: usize,
    pub mlp_mult: usize,
    pub act: Activation,
    /// Image vocabulary size; must match the VQ codebook.
    pub n_image: usize,
    pub vit: VitConfig,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            blocks: 4,
            heads: 4,
            context: 512,
            mlp_mult: 4,
            act: Activation::Gelu,
            n_image: 64,
            vit: VitConfig::default(),
        }
    }
}

/// Loss value plus a per-segment breakdown of the masked targets.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub loss: f64,
    pub masked_count: usize,
    /// (segment, mean CE over its masked targets, target count).
    pub per_segment: Vec<(Segment, f64, usize)>,
}

impl LossReport {
    pub fn segment_loss(&self, seg: Segment) -> Option<(f64, usize)> {
        self.per_segment
            .iter()
            .find(|&&(s, _, _)| s == seg)
            .map(|&(_, l, c)| (l, c))
    }
}

pub struct UnifiedModel {
    pub cfg: LmConfig,
    pub vocab: JointVocabulary,
    embed: Var,
    pos: Var,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
    head: Linear,
    pub vision: VisionEncoder,
    params: ParamSet,
}

impl UnifiedModel {
    pub fn init<T: Real>(tape: &mut Tape<T>, cfg: LmConfig, rng: &mut Rng) -> Result<Self> {
        let mut lm_params = ParamList::new();
        let vocab = JointVocabulary::new(cfg.n_image);
        if cfg.dim % cfg.heads != 0 {
            return Err(usage_err!("dim {} not divisible by {} heads", cfg.dim, cfg.heads));
        }
        let mut vit_cfg = cfg.vit.clone();
        vit_cfg.lm_width = cfg.dim;

        let embed = tape.leaf(
            Tensor::randn(vec![vocab.total(), cfg.dim], 0.02, rng),
            true,
        );
        lm_params.push("llm.embed".into(), embed);
        let pos = tape.leaf(Tensor::randn(vec![cfg.context, cfg.dim], 0.02, rng), true);
        lm_params.push("llm.pos".into(), pos);
        let blocks: Vec<Block> = (0..cfg.blocks)
            .map(|i| {
                Block::init(
                    tape,
                    &mut lm_params,
                    &format!("llm.block{i}"),
                    cfg.dim,
                    cfg.heads,
                    cfg.mlp_mult,
                    cfg.act,
                    rng,
                )
            })
            .collect();
        let final_norm = LayerNorm::init(tape, &mut lm_params, "llm.final_norm", cfg.dim);
        // Head untied from the embedding table: the continuous
        // pass-through path stays independent of output geometry.
        let head = Linear::init(tape, &mut lm_params, "llm.head", cfg.dim, vocab.total(), rng);

        let vision = VisionEncoder::init(tape, vit_cfg, rng)?;
        let params = ParamSet {
            groups: vec![
                ParamGroup {
                    name: "llm".into(),
                    entries: lm_params.entries,
                    lr_scale: 1.0,
                },
                ParamGroup {
                    name: "vit".into(),
                    entries: vision.vit_entries().to_vec(),
                    lr_scale: 1.0,
                },
                ParamGroup {
                    name: "adapter".into(),
                    entries: vision.adapter_entries().to_vec(),
                    lr_scale: 1.0,
                },
            ],
        };
        params.validate()?;
        Ok(Self {
            cfg,
            vocab,
            embed,
            pos,
            blocks,
            final_norm,
            head,
            vision,
            params,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Runs the continuous branch (grid select + ViT + adapter) on the
    /// tape; gradients reach the vit/adapter groups through the result.
    pub fn continuous_features<T: Real>(&self, tape: &mut Tape<T>, image: &Image) -> Result<Var> {
        let grid = select_grid(image.w as f64 / image.h as f64, self.vision.cfg.scaleup);
        self.vision.forward(tape, image, grid)
    }

    /// Mixed embedding: lookup for discrete slots, pass-through for
    /// continuous slots, plus learned absolute positions. When
    /// `cont` is given it must stack exactly the sequence's continuous
    /// rows (training path); otherwise the slot-stored vectors are
    /// used (inference on frozen features).
    pub fn embed_slots<T: Real>(
        &self,
        tape: &mut Tape<T>,
        seq: &MultimodalSequence<T>,
        cont: Option<Var>,
    ) -> Result<Var> {
        let t_len = seq.len();
        if t_len == 0 {
            return Err(usage_err!("empty sequence"));
        }
        if t_len > self.cfg.context {
            return Err(usage_err!(
                "sequence length {t_len} exceeds context {}",
                self.cfg.context
            ));
        }
        let mut ids = Vec::with_capacity(t_len);
        let mut cont_positions = Vec::new();
        for (i, slot) in seq.slots.iter().enumerate() {
            match &slot.content {
                SlotContent::Discrete(id) => {
                    if *id >= self.vocab.total() {
                        return Err(usage_err!("slot {i}: id {id} outside joint vocabulary"));
                    }
                    ids.push(*id);
                }
                SlotContent::Continuous(v) => {
                    if v.len() != self.cfg.dim {
                        return Err(shape_err!(
                            "slot {i}: continuous width {} != LM width {}",
                            v.len(),
                            self.cfg.dim
                        ));
                    }
                    ids.push(0); // placeholder row, masked out below
                    cont_positions.push(i);
                }
            }
        }
        let mut x = tape.embedding(self.embed, &ids)?;
        if !cont_positions.is_empty() {
            let keep: Vec<T> = seq
                .slots
                .iter()
                .map(|s| if s.is_continuous() { T::ZERO } else { T::ONE })
                .collect();
            x = tape.scale_rows(x, keep)?;
            let stack = match cont {
                Some(v) => {
                    let got = tape.value(v);
                    if got.shape() != [cont_positions.len(), self.cfg.dim] {
                        return Err(shape_err!(
                            "continuous stack {:?}, sequence wants [{}, {}]",
                            got.shape(),
                            cont_positions.len(),
                            self.cfg.dim
                        ));
                    }
                    v
                }
                None => {
                    let mut data = Vec::with_capacity(cont_positions.len() * self.cfg.dim);
                    for &p in &cont_positions {
                        if let SlotContent::Continuous(v) = &seq.slots[p].content {
                            data.extend(v.iter().copied());
                        }
                    }
                    let t = Tensor::new(vec![cont_positions.len(), self.cfg.dim], data)?;
                    tape.constant(t)
                }
            };
            let scattered = tape.scatter_rows(stack, &cont_positions, t_len)?;
            x = tape.add(x, scattered)?;
        } else if cont.is_some() {
            return Err(usage_err!(
                "continuous stack provided for a sequence without continuous slots"
            ));
        }
        let pos = tape.slice_rows(self.pos, 0, t_len)?;
        tape.add(x, pos)
    }

    /// Causal forward to [T, V] logits.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        seq: &MultimodalSequence<T>,
        cont: Option<Var>,
    ) -> Result<Var> {
        let mut x = self.embed_slots(tape, seq, cont)?;
        for block in &self.blocks {
            x = block.forward(tape, x, true)?;
        }
        let x = self.final_norm.forward(tape, x)?;
        self.head.forward(tape, x)
    }

    /// Next-token objective: logits at position t are scored against
    /// the target at t+1 where its mask is set. Returns the scalar
    /// loss node and a per-segment report.
    pub fn lm_loss<T: Real>(
        &self,
        tape: &mut Tape<T>,
        seq: &MultimodalSequence<T>,
        cont: Option<Var>,
    ) -> Result<(Var, LossReport)> {
        let t_len = seq.len();
        if t_len < 2 {
            return Err(usage_err!("loss needs at least two slots"));
        }
        let logits = self.forward(tape, seq, cont)?;
        let (targets, mask) = seq.targets_and_mask();
        let shifted_targets = &targets[1..];
        let shifted_mask = &mask[1..];
        if !shifted_mask.iter().any(|&m| m) {
            return Err(usage_err!("sequence has no masked target"));
        }
        let scores = tape.slice_rows(logits, 0, t_len - 1)?;
        let (loss, count) = tape.masked_cross_entropy(scores, shifted_targets, shifted_mask)?;

        // Per-segment breakdown, recomputed value-level.
        let mut agg: Vec<(Segment, f64, usize)> = Vec::new();
        let values = tape.value(scores);
        for (row, (&target, &m)) in shifted_targets.iter().zip(shifted_mask).enumerate() {
            if !m {
                continue;
            }
            let seg = seq.slots[row + 1].segment;
            let lane = values.row(row);
            let ce = (kn::log_sum_exp(lane) - lane[target]).to_f64();
            match agg.iter_mut().find(|(s, _, _)| *s == seg) {
                Some(entry) => {
                    entry.1 += ce;
                    entry.2 += 1;
                }
                None => agg.push((seg, ce, 1)),
            }
        }
        for entry in &mut agg {
            entry.1 /= entry.2 as f64;
        }
        let report = LossReport {
            loss: tape.value(loss).data()[0].to_f64(),
            masked_count: count,
            per_segment: agg,
        };
        Ok((loss, report))
    }

    /// Names and values of every parameter, prefixed by group, for
    /// checkpointing.
    pub fn export_tensors<T: Real>(&self, tape: &Tape<T>) -> Vec<(String, Tensor<T>)> {
        self.params
            .all_entries()
            .map(|(n, v)| (n.clone(), tape.value(*v).clone()))
            .collect()
    }

    pub fn import_tensors<T: Real>(
        &self,
        tape: &mut Tape<T>,
        tensors: &[(String, Tensor<T>)],
    ) -> Result<()> {
        for (name, var) in self
            .params
            .all_entries()
            .map(|(n, v)| (n.clone(), *v))
            .collect::<Vec<_>>()
        {
            let found = tensors
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| usage_err!("checkpoint missing tensor {name}"))?;
            if found.1.shape() != tape.value(var).shape() {
                return Err(shape_err!(
                    "tensor {name}: checkpoint {:?} vs model {:?}",
                    found.1.shape(),
                    tape.value(var).shape()
                ));
            }
            tape.set_value(var, found.1.clone());
        }
        Ok(())
    }

    /// Opens a no-grad incremental decoding session over frozen
    /// weights. Multiple sessions may read the same tape concurrently.
    pub fn session<'a, T: Real>(&'a self, tape: &'a Tape<T>) -> DecodeSession<'a, T> {
        DecodeSession::new(self, tape)
    }
}

/// One slot of decode-session input.
pub enum SlotInput<'a, T> {
    Id(usize),
    Vector(&'a [T]),
}

struct LayerCache<T> {
    k: Vec<T>,
    v: Vec<T>,
}

/// Incremental forward pass with per-layer KV caches. Pure value
/// computation: nothing is recorded for gradients.
pub struct DecodeSession<'a, T: Real> {
    model: &'a UnifiedModel,
    tape: &'a Tape<T>,
    caches: Vec<LayerCache<T>>,
    last_hidden: Vec<T>,
    pos: usize,
}

impl<'a, T: Real> DecodeSession<'a, T> {
    fn new(model: &'a UnifiedModel, tape: &'a Tape<T>) -> Self {
        let caches = (0..model.cfg.blocks)
            .map(|_| LayerCache {
                k: Vec::new(),
                v: Vec::new(),
            })
            .collect();
        Self {
            model,
            tape,
            caches,
            last_hidden: Vec::new(),
            pos: 0,
        }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    fn row_vec(&self, var: Var, row: usize) -> &[T] {
        self.tape.value(var).row(row)
    }

    fn linear_row(&self, x: &[T], lin: &Linear) -> Vec<T> {
        let w = self.tape.value(lin.w);
        let b = self.tape.value(lin.b);
        let (din, dout) = (w.rows(), w.cols());
        debug_assert_eq!(x.len(), din);
        let mut out = b.data().to_vec();
        kn::mm_nn(&mut out, x, w.data(), 1, din, dout);
        out
    }

    fn layer_norm_row(&self, x: &[T], ln: &LayerNorm) -> Vec<T> {
        let mut out = x.to_vec();
        kn::layer_norm_lane(&mut out, T::from_f64(1e-5));
        let gain = self.tape.value(ln.gain);
        let bias = self.tape.value(ln.bias);
        for (j, v) in out.iter_mut().enumerate() {
            *v = *v * gain.data()[j] + bias.data()[j];
        }
        out
    }

    /// Feeds one slot; the hidden state after all blocks is retained
    /// for [`Self::logits`].
    pub fn push(&mut self, input: SlotInput<'_, T>) -> Result<()> {
        let cfg = &self.model.cfg;
        if self.pos >= cfg.context {
            return Err(usage_err!("decode session exceeded context {}", cfg.context));
        }
        let d = cfg.dim;
        let mut x: Vec<T> = match input {
            SlotInput::Id(id) => {
                if id >= self.model.vocab.total() {
                    return Err(usage_err!("id {id} outside joint vocabulary"));
                }
                self.row_vec(self.model.embed, id).to_vec()
            }
            SlotInput::Vector(v) => {
                if v.len() != d {
                    return Err(shape_err!("continuous width {} != LM width {d}", v.len()));
                }
                v.to_vec()
            }
        };
        let pos_row = self.row_vec(self.model.pos, self.pos);
        for (xi, &p) in x.iter_mut().zip(pos_row) {
            *xi += p;
        }

        let heads = cfg.heads;
        let hd = d / heads;
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());
        let t = self.pos; // rows already cached
        for (bi, block) in self.model.blocks.iter().enumerate() {
            let normed = self.layer_norm_row(&x, &block.ln1);
            let q = self.linear_row(&normed, &block.wq);
            let k = self.linear_row(&normed, &block.wk);
            let v = self.linear_row(&normed, &block.wv);
            let cache = &mut self.caches[bi];
            cache.k.extend_from_slice(&k);
            cache.v.extend_from_slice(&v);

            let mut ctx = vec![T::ZERO; d];
            for h in 0..heads {
                let qh = &q[h * hd..(h + 1) * hd];
                // scores over positions 0..=t
                let mut scores = Vec::with_capacity(t + 1);
                for j in 0..=t {
                    let kh = &cache.k[j * d + h * hd..j * d + (h + 1) * hd];
                    let mut s = T::ZERO;
                    for (a, b) in qh.iter().zip(kh) {
                        s += *a * *b;
                    }
                    scores.push(s * scale);
                }
                kn::softmax_lane(&mut scores);
                let ctx_h = &mut ctx[h * hd..(h + 1) * hd];
                for (j, &p) in scores.iter().enumerate() {
                    let vh = &cache.v[j * d + h * hd..j * d + (h + 1) * hd];
                    for (c, &vv) in ctx_h.iter_mut().zip(vh) {
                        *c += p * vv;
                    }
                }
            }
            let proj = self.linear_row(&ctx, &block.wo);
            for (xi, &p) in x.iter_mut().zip(&proj) {
                *xi += p;
            }
            let normed2 = self.layer_norm_row(&x, &block.ln2);
            let h1 = self.linear_row(&normed2, &block.fc1);
            let h1: Vec<T> = match cfg.act {
                Activation::Gelu => h1.into_iter().map(kn::gelu).collect(),
                Activation::Silu => h1.into_iter().map(kn::silu).collect(),
            };
            let h2 = self.linear_row(&h1, &block.fc2);
            for (xi, &p) in x.iter_mut().zip(&h2) {
                *xi += p;
            }
        }
        self.last_hidden = x;
        self.pos += 1;
        Ok(())
    }

    /// Logits over the joint vocabulary for the next position.
    pub fn logits(&self) -> Result<Vec<T>> {
        if self.last_hidden.is_empty() {
            return Err(usage_err!("no slot pushed yet"));
        }
        let normed = self.layer_norm_row(&self.last_hidden, &self.model.final_norm);
        Ok(self.linear_row(&normed, &self.model.head))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{assemble_generation, assemble_understanding, encode_text};
    use crate::vq::TokenGrid;

    fn tiny_cfg() -> LmConfig {
        LmConfig {
            dim: 16,
            blocks: 2,
            heads: 2,
            context: 96,
            mlp_mult: 2,
            n_image: 8,
            vit: VitConfig {
                cell_size: 8,
                patch_size: 4,
                width: 8,
                blocks: 1,
                heads: 2,
                lm_width: 16,
                scaleup: false,
            },
            ..Default::default()
        }
    }

    fn setup() -> (Tape<f32>, UnifiedModel) {
        let mut tape = Tape::new();
        let mut rng = Rng::new(77);
        let model = UnifiedModel::init(&mut tape, tiny_cfg(), &mut rng).unwrap();
        tape.mark_persistent();
        (tape, model)
    }

    fn sample_seq(model: &UnifiedModel) -> MultimodalSequence<f32> {
        let grid = TokenGrid::new(2, 2, alloc::vec![0, 1, 2, 3]).unwrap();
        let cont = Tensor::zeros(alloc::vec![4, 16]);
        assemble_understanding(
            &grid,
            Some(&cont),
            &encode_text("q?"),
            &encode_text("ok"),
            &model.vocab,
        )
        .unwrap()
    }

    #[test]
    fn embed_shapes_and_passthrough() {
        let (mut tape, model) = setup();
        let seq = sample_seq(&model);
        let x = model.embed_slots(&mut tape, &seq, None).unwrap();
        assert_eq!(tape.value(x).shape(), &[seq.len(), 16]);

        // discrete slot id j maps to row j of the table (+ position)
        let slot0_id = seq.slots[0].id().unwrap();
        let emb_row = tape.value(model.embed).row(slot0_id).to_vec();
        let pos_row = tape.value(model.pos).row(0).to_vec();
        let got = tape.value(x).row(0).to_vec();
        for i in 0..16 {
            assert!((got[i] - (emb_row[i] + pos_row[i])).abs() < 1e-6);
        }

        // continuous slot vector v -> v + pos(t); slot 6 is the first
        // continuous one (BOS BOI 4xids SEP -> index 7 actually).
        let first_cont = seq.slots.iter().position(|s| s.is_continuous()).unwrap();
        let pos_row = tape.value(model.pos).row(first_cont).to_vec();
        let got = tape.value(x).row(first_cont).to_vec();
        for i in 0..16 {
            assert!((got[i] - pos_row[i]).abs() < 1e-6); // vectors are zero
        }
    }

    #[test]
    fn forward_is_causal_at_random_positions() {
        let (mut tape, model) = setup();
        let seq = sample_seq(&model);
        let logits = model.forward(&mut tape, &seq, None).unwrap();
        let base = tape.value(logits).clone();
        tape.reset();

        let mut rng = Rng::new(123);
        for _ in 0..20 {
            let t = 1 + rng.below(seq.len() - 1);
            let mut perturbed = seq.clone();
            match &mut perturbed.slots[t].content {
                SlotContent::Discrete(id) => {
                    *id = (*id + 1 + rng.below(200)) % model.vocab.total();
                }
                SlotContent::Continuous(v) => {
                    v[rng.below(16)] += 1.5;
                }
            }
            let logits2 = model.forward(&mut tape, &perturbed, None).unwrap();
            let after = tape.value(logits2).clone();
            for row in 0..t {
                assert_eq!(base.row(row), after.row(row), "row {row} of perturb at {t}");
            }
            tape.reset();
        }
    }

    #[test]
    fn single_bos_slot_forward() {
        let (mut tape, model) = setup();
        let seq = MultimodalSequence::<f32> {
            slots: alloc::vec![crate::codec::Slot {
                content: SlotContent::Discrete(
                    model.vocab.special(crate::codec::SpecialToken::Bos)
                ),
                segment: Segment::Special,
                loss_masked: false,
            }],
            task: crate::codec::TaskKind::Understanding,
        };
        let logits = model.forward(&mut tape, &seq, None).unwrap();
        assert_eq!(tape.value(logits).shape(), &[1, model.vocab.total()]);
    }

    #[test]
    fn forward_deterministic() {
        let (mut tape, model) = setup();
        let seq = sample_seq(&model);
        let a = model.forward(&mut tape, &seq, None).unwrap();
        let av = tape.value(a).clone();
        tape.reset();
        let b = model.forward(&mut tape, &seq, None).unwrap();
        assert_eq!(av, *tape.value(b));
    }

    #[test]
    fn context_overflow_rejected() {
        let (mut tape, model) = setup();
        let grid = TokenGrid::new(10, 10, (0..100).map(|i| i % 8).collect()).unwrap();
        let seq =
            assemble_generation::<f32>(&encode_text("p"), &grid, &model.vocab).unwrap();
        assert!(model.forward(&mut tape, &seq, None).is_err());
    }

    #[test]
    fn loss_breakdown_segments() {
        let (mut tape, model) = setup();
        let seq = sample_seq(&model);
        let (_, report) = model.lm_loss(&mut tape, &seq, None).unwrap();
        // understanding: no image_d contribution, answer + eos only
        assert!(report.segment_loss(Segment::ImageD).is_none());
        assert!(report.segment_loss(Segment::AnswerText).is_some());
        assert!(report.segment_loss(Segment::Special).is_some());
        assert_eq!(report.masked_count, 3); // "ok" + EOS
        tape.reset();

        let grid = TokenGrid::new(2, 2, alloc::vec![4, 5, 6, 7]).unwrap();
        let gen =
            assemble_generation::<f32>(&encode_text("go"), &grid, &model.vocab).unwrap();
        let (_, report) = model.lm_loss(&mut tape, &gen, None).unwrap();
        assert!(report.segment_loss(Segment::PromptText).is_none());
        assert!(report.segment_loss(Segment::GenImage).is_some());
        let (_, gen_count) = report.segment_loss(Segment::GenImage).unwrap();
        assert_eq!(gen_count, 4);
    }

    #[test]
    fn saturated_teacher_drives_loss_to_zero() {
        let (mut tape, model) = setup();
        let seq = sample_seq(&model);
        // Build logits directly: the model can't saturate, so check
        // the loss op end-to-end through lm_loss's slicing instead:
        // craft a model-free check through masked_cross_entropy.
        let (targets, mask) = seq.targets_and_mask();
        let t = seq.len();
        let vsize = model.vocab.total();
        let mut logits = Tensor::<f32>::zeros(alloc::vec![t - 1, vsize]);
        for row in 0..t - 1 {
            logits.data_mut()[row * vsize + targets[row + 1]] = 20.0;
        }
        let lv = tape.leaf(logits, false);
        let (loss, _) = tape
            .masked_cross_entropy(lv, &targets[1..], &mask[1..])
            .unwrap();
        assert!(tape.value(loss).data()[0] < 1e-6);
    }

    #[test]
    fn session_matches_full_forward() {
        let (mut tape, model) = setup();
        let seq = sample_seq(&model);
        let logits = model.forward(&mut tape, &seq, None).unwrap();
        let full = tape.value(logits).clone();

        let mut session = model.session(&tape);
        for slot in &seq.slots {
            match &slot.content {
                SlotContent::Discrete(id) => session.push(SlotInput::Id(*id)).unwrap(),
                SlotContent::Continuous(v) => session.push(SlotInput::Vector(v)).unwrap(),
            }
        }
        let last = session.logits().unwrap();
        let want = full.row(seq.len() - 1);
        for (a, b) in last.iter().zip(want) {
            assert!(
                (a - b).abs() < 1e-4,
                "session logits diverge: {a} vs {b}"
            );
        }
    }

    #[test]
    fn one_head_one_vocab_structurally() {
        let (tape, model) = setup();
        // Exactly one embedding table and one head; the union of the
        // groups is all of theta and groups are disjoint.
        model.params().validate().unwrap();
        let names: Vec<&str> = model
            .params()
            .all_entries()
            .map(|(n, _)| n.as_str())
            .collect();
        assert_eq!(names.iter().filter(|n| n.contains("head")).count(), 2); // w + b
        assert_eq!(names.iter().filter(|n| **n == "llm.embed").count(), 1);
        assert!(!names.iter().any(|n| n.contains("task")));
        let _ = tape;
    }
}
