//! Discrete visual encoding: a small convolutional VQ autoencoder.
//!
//! Images go through a strided-conv encoder to a grid of latents,
//! each latent snaps to its nearest codebook entry (straight-through
//! gradient), and a decoder maps the quantized grid back to pixels.
//! The codebook is learned with the standard three-term objective:
//! reconstruction + codebook + commitment.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, usage_err, Result};
use crate::image::Image;
use crate::nn::ParamList;
use crate::optim::{AdamW, ParamGroup, ParamSet};
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Grid of codebook IDs standing in for an image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    pub h: usize,
    pub w: usize,
    pub ids: Vec<usize>,
}

impl TokenGrid {
    pub fn new(h: usize, w: usize, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != h * w {
            return Err(shape_err!("token grid {h}x{w} wants {} ids, got {}", h * w, ids.len()));
        }
        Ok(Self { h, w, ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct VqConfig {
    /// Spatial downsample factor f; a power of two. Each stride-2
    /// stage halves the resolution.
    pub downsample: usize,
    /// Codebook entry count K.
    pub codebook_size: usize,
    /// Codebook embedding width D.
    pub embed_dim: usize,
    /// Commitment weight beta.
    pub commitment_weight: f64,
    /// Channel widths of the stride-2 stages, innermost last; its
    /// length must be log2(downsample).
    pub channels: Vec<usize>,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            downsample: 4,
            codebook_size: 64,
            embed_dim: 16,
            commitment_weight: 0.25,
            channels: vec![16, 32],
        }
    }
}

impl VqConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.downsample.is_power_of_two() || self.downsample < 2 {
            return Err(usage_err!("downsample {} must be a power of two >= 2", self.downsample));
        }
        if self.codebook_size < 2 {
            return Err(usage_err!("codebook size {} < 2", self.codebook_size));
        }
        if self.commitment_weight < 0.0 {
            return Err(usage_err!("negative commitment weight"));
        }
        let stages = self.downsample.trailing_zeros() as usize;
        if self.channels.len() != stages {
            return Err(usage_err!(
                "downsample {} needs {} channel widths, got {}",
                self.downsample,
                stages,
                self.channels.len()
            ));
        }
        Ok(())
    }
}

/// Nearest codebook entry per latent row, squared Euclidean distance,
/// ties broken toward the lowest index.
pub fn nearest_entries<T: Real>(latents: &Tensor<T>, codebook: &Tensor<T>) -> Result<Vec<usize>> {
    if latents.shape().len() != 2 || latents.cols() != codebook.cols() {
        return Err(shape_err!(
            "latents {:?} vs codebook {:?}",
            latents.shape(),
            codebook.shape()
        ));
    }
    let d = latents.cols();
    let k = codebook.rows();
    let mut ids = Vec::with_capacity(latents.rows());
    for i in 0..latents.rows() {
        let row = latents.row(i);
        let mut best = 0usize;
        let mut best_dist = T::from_f64(f64::INFINITY);
        for e in 0..k {
            let entry = codebook.row(e);
            let mut dist = T::ZERO;
            for j in 0..d {
                let delta = row[j] - entry[j];
                dist += delta * delta;
            }
            if dist < best_dist {
                best_dist = dist;
                best = e;
            }
        }
        ids.push(best);
    }
    Ok(ids)
}

/// Value-level quantization: returns ids and the quantized rows.
pub fn quantize<T: Real>(
    latents: &Tensor<T>,
    codebook: &Tensor<T>,
) -> Result<(Vec<usize>, Tensor<T>)> {
    let ids = nearest_entries(latents, codebook)?;
    let d = codebook.cols();
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in &ids {
        data.extend_from_slice(codebook.row(id));
    }
    let quantized = Tensor::new(vec![ids.len(), d], data)?;
    Ok((ids, quantized))
}

/// One conv layer realized as unfold + matmul.
#[derive(Debug, Clone, Copy)]
struct Conv {
    w: Var,
    b: Var,
    k: usize,
    stride: usize,
    pad: usize,
    cout: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn init<T: Real>(
        tape: &mut Tape<T>,
        params: &mut ParamList,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = k * k * cin;
        let std = 1.0 / (fan_in as f64).sqrt();
        let w = tape.leaf(Tensor::randn(vec![fan_in, cout], std, rng), true);
        let b = tape.leaf(Tensor::zeros(vec![cout]), true);
        params.push(format!("{name}.w"), w);
        params.push(format!("{name}.b"), b);
        Self { w, b, k, stride, pad, cout }
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let (h, w) = {
            let s = tape.value(x).shape();
            (s[0], s[1])
        };
        let oh = (h + 2 * self.pad - self.k) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.k) / self.stride + 1;
        let cols = tape.unfold(x, self.k, self.stride, self.pad)?;
        let y = tape.matmul(cols, self.w)?;
        let y = tape.add_bias(y, self.b)?;
        tape.reshape(y, vec![oh, ow, self.cout])
    }
}

/// Loss components of one VQ training step.
#[derive(Debug, Clone, Copy)]
pub struct VqLosses {
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub total: f64,
}

pub struct VqTokenizer<T: Real> {
    pub cfg: VqConfig,
    tape: Tape<T>,
    encoder: Vec<Conv>,
    decoder: Vec<Conv>,
    codebook: Var,
    params: ParamSet,
    /// Codebook usage counts since the last reset; entries that stay
    /// at zero over an epoch are reported as dead by the trainer.
    usage: Vec<u64>,
}

impl<T: Real> VqTokenizer<T> {
    pub fn new(cfg: VqConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut tape = Tape::new();
        let mut rng = Rng::stream(seed, 0x7671696e);
        let mut enc_params = ParamList::new();
        let mut dec_params = ParamList::new();

        let mut encoder = Vec::new();
        let mut cin = crate::image::CHANNELS;
        for (i, &c) in cfg.channels.iter().enumerate() {
            encoder.push(Conv::init(
                &mut tape, &mut enc_params, &format!("enc.down{i}"), cin, c, 4, 2, 1, &mut rng,
            ));
            cin = c;
        }
        encoder.push(Conv::init(
            &mut tape, &mut enc_params, "enc.out", cin, cfg.embed_dim, 3, 1, 1, &mut rng,
        ));

        let mut decoder = Vec::new();
        let mut cin = cfg.embed_dim;
        for (i, &c) in cfg.channels.iter().enumerate().rev() {
            decoder.push(Conv::init(
                &mut tape, &mut dec_params, &format!("dec.up{i}"), cin, c, 3, 1, 1, &mut rng,
            ));
            cin = c;
        }
        decoder.push(Conv::init(
            &mut tape, &mut dec_params, "dec.out", cin, crate::image::CHANNELS, 3, 1, 1, &mut rng,
        ));

        let codebook = tape.leaf(
            Tensor::randn(vec![cfg.codebook_size, cfg.embed_dim], 0.5, &mut rng),
            true,
        );
        tape.mark_persistent();

        let params = ParamSet {
            groups: vec![
                ParamGroup {
                    name: "vq_encoder".into(),
                    entries: enc_params.entries,
                    lr_scale: 1.0,
                },
                ParamGroup {
                    name: "vq_decoder".into(),
                    entries: dec_params.entries,
                    lr_scale: 1.0,
                },
                ParamGroup {
                    name: "codebook".into(),
                    entries: vec![("codebook".into(), codebook)],
                    lr_scale: 1.0,
                },
            ],
        };
        params.validate()?;
        let usage = vec![0; cfg.codebook_size];
        Ok(Self {
            cfg,
            tape,
            encoder,
            decoder,
            codebook,
            params,
            usage,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn tape_mut(&mut self) -> &mut Tape<T> {
        &mut self.tape
    }

    pub fn codebook_var(&self) -> Var {
        self.codebook
    }

    pub fn codebook_usage(&self) -> &[u64] {
        &self.usage
    }

    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|u| *u = 0);
    }

    fn check_divisible(&self, img: &Image) -> Result<()> {
        let f = self.cfg.downsample;
        if img.h % f != 0 || img.w % f != 0 {
            return Err(usage_err!(
                "image {}x{} not divisible by downsample factor {f}; no silent padding",
                img.h,
                img.w
            ));
        }
        Ok(())
    }

    /// Appends the encoder onto the tape: image tensor -> latents
    /// [h*w, D] plus the latent grid dims.
    fn encode_on_tape(&mut self, img: &Image) -> Result<(Var, usize, usize)> {
        let x = self.tape.constant(img.to_tensor());
        let mut h = x;
        for (i, conv) in self.encoder.iter().enumerate() {
            h = conv.forward(&mut self.tape, h)?;
            if i + 1 < self.encoder.len() {
                h = self.tape.silu(h);
            }
        }
        let shape = self.tape.value(h).shape().to_vec();
        let (gh, gw) = (shape[0], shape[1]);
        let latents = self.tape.reshape(h, vec![gh * gw, self.cfg.embed_dim])?;
        Ok((latents, gh, gw))
    }

    /// Appends the decoder: quantized latents [h*w, D] -> image tensor.
    fn decode_on_tape(&mut self, z: Var, gh: usize, gw: usize) -> Result<Var> {
        let mut h = self.tape.reshape(z, vec![gh, gw, self.cfg.embed_dim])?;
        let n = self.decoder.len();
        for (i, conv) in self.decoder.iter().enumerate() {
            h = conv.forward(&mut self.tape, h)?;
            if i + 1 < n {
                h = self.tape.silu(h);
                h = self.tape.upsample2x(h)?;
            }
        }
        Ok(h)
    }

    /// Discretizes an image into a grid of codebook IDs.
    pub fn encode_image(&mut self, img: &Image) -> Result<TokenGrid> {
        self.check_divisible(img)?;
        let mark = self.tape.len();
        let result = (|| {
            let (latents, gh, gw) = self.encode_on_tape(img)?;
            let ids = nearest_entries(self.tape.value(latents), self.tape.value(self.codebook))?;
            TokenGrid::new(gh, gw, ids)
        })();
        self.truncate(mark);
        result
    }

    /// Decodes a grid of IDs back to pixels, clamped to [0,1].
    pub fn decode_tokens(&mut self, grid: &TokenGrid) -> Result<Image> {
        if let Some(&bad) = grid.ids.iter().find(|&&i| i >= self.cfg.codebook_size) {
            return Err(usage_err!(
                "token id {bad} out of codebook range {}",
                self.cfg.codebook_size
            ));
        }
        let mark = self.tape.len();
        let result = (|| {
            let z = self.tape.embedding(self.codebook, &grid.ids)?;
            let out = self.decode_on_tape(z, grid.h, grid.w)?;
            Image::from_tensor(self.tape.value(out))
        })();
        self.truncate(mark);
        result
    }

    /// encode + decode in one go; the round-trip used for MSE checks.
    pub fn reconstruct(&mut self, img: &Image) -> Result<Image> {
        let grid = self.encode_image(img)?;
        self.decode_tokens(&grid)
    }

    fn truncate(&mut self, mark: usize) {
        self.tape.truncate_to(mark);
    }

    /// One optimizer step over a batch of images. Returns the batch-
    /// mean loss components.
    pub fn train_step(
        &mut self,
        batch: &[Image],
        opt: &mut AdamW<T>,
        lr: f64,
    ) -> Result<VqLosses> {
        if batch.is_empty() {
            return Err(usage_err!("empty batch"));
        }
        for img in batch {
            self.check_divisible(img)?;
        }
        let mark = self.tape.len();
        let beta = T::from_f64(self.cfg.commitment_weight);
        let inv_n = T::from_f64(1.0 / batch.len() as f64);

        let mut recon_terms = Vec::new();
        let mut codebook_terms = Vec::new();
        let mut commit_terms = Vec::new();
        for img in batch {
            let (z_e, gh, gw) = self.encode_on_tape(img)?;
            let ids = nearest_entries(self.tape.value(z_e), self.tape.value(self.codebook))?;
            for &id in &ids {
                self.usage[id] += 1;
            }
            let z_q = self.tape.embedding(self.codebook, &ids)?;

            // Straight-through: decoder sees z_e + sg(z_q - z_e).
            let diff = self.tape.sub(z_q, z_e)?;
            let sg_diff = self.tape.detach(diff);
            let z_ste = self.tape.add(z_e, sg_diff)?;
            let recon = self.decode_on_tape(z_ste, gh, gw)?;

            let target = self.tape.constant(img.to_tensor());
            let d = self.tape.sub(recon, target)?;
            let d2 = self.tape.mul(d, d)?;
            recon_terms.push(self.tape.mean(d2));

            // ||sg(z_e) - e||^2: moves the codebook toward latents.
            let sg_ze = self.tape.detach(z_e);
            let cd = self.tape.sub(z_q, sg_ze)?;
            let cd2 = self.tape.mul(cd, cd)?;
            codebook_terms.push(self.tape.mean(cd2));

            // beta * ||z_e - sg(e)||^2: commits latents to their entry.
            let sg_zq = self.tape.detach(z_q);
            let md = self.tape.sub(z_e, sg_zq)?;
            let md2 = self.tape.mul(md, md)?;
            commit_terms.push(self.tape.mean(md2));
        }

        let recon = self.sum_scaled(&recon_terms, inv_n)?;
        let codebook = self.sum_scaled(&codebook_terms, inv_n)?;
        let commit = self.sum_scaled(&commit_terms, inv_n)?;

        let scaled_commit = self.tape.scale(commit, beta);
        let partial = self.tape.add(recon, codebook)?;
        let total = self.tape.add(partial, scaled_commit)?;

        let losses = VqLosses {
            reconstruction: self.tape.value(recon).data()[0].to_f64(),
            codebook: self.tape.value(codebook).data()[0].to_f64(),
            commitment: self.tape.value(commit).data()[0].to_f64(),
            total: self.tape.value(total).data()[0].to_f64(),
        };

        for &(_, v) in self.params.all_entries() {
            self.tape.zero_grad(v);
        }
        self.tape.backward(total)?;
        let updates: Vec<(Var, f64)> = self
            .params
            .all_entries()
            .map(|&(_, v)| (v, lr))
            .collect();
        opt.step(&mut self.tape, &updates)?;
        self.truncate(mark);
        Ok(losses)
    }

    fn sum_scaled(&mut self, terms: &[Var], factor: T) -> Result<Var> {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.tape.add(acc, t)?;
        }
        Ok(self.tape.scale(acc, factor))
    }

    /// Names of codebook entries never used since the last reset.
    pub fn dead_entries(&self) -> Vec<usize> {
        self.usage
            .iter()
            .enumerate()
            .filter(|&(_, &u)| u == 0)
            .map(|(i, _)| i)
            .collect()
    }

    /// Export all parameters as named tensors for checkpointing.
    pub fn export_tensors(&self) -> Vec<(String, Tensor<T>)> {
        self.params
            .all_entries()
            .map(|(n, v)| (format!("vq.{n}"), self.tape.value(*v).clone()))
            .collect()
    }

    /// Load parameters previously produced by [`Self::export_tensors`].
    pub fn import_tensors(&mut self, tensors: &[(String, Tensor<T>)]) -> Result<()> {
        for (name, var) in self
            .params
            .all_entries()
            .map(|(n, v)| (format!("vq.{n}"), *v))
            .collect::<Vec<_>>()
        {
            let found = tensors
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| usage_err!("checkpoint missing tensor {name}"))?;
            if found.1.shape() != self.tape.value(var).shape() {
                return Err(shape_err!(
                    "tensor {name}: checkpoint {:?} vs model {:?}",
                    found.1.shape(),
                    self.tape.value(var).shape()
                ));
            }
            self.tape.set_value(var, found.1.clone());
        }
        Ok(())
    }
}
