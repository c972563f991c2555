//! The masked-autoencoder ViT: configuration, parameters, encoder/decoder
//! forwards on the tape, the pretraining step, and attention-map extraction.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_seed;
use crate::tensor::{AdamW, Gradients, ParamStore, Tape, Tensor, Var};
use crate::util::indexed_map;
use crate::vit::mask::{masked_count, random_mask, MaskPlan};
use crate::vit::patches::{patchify, PatchGrid};
use crate::vit::pos::sincos_pos_embed;

const LN_EPS: f32 = 1e-6;

/// Architecture hyperparameters. Square images, square patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub input_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub encoder_dim: usize,
    pub encoder_depth: usize,
    pub encoder_heads: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub mlp_ratio: f32,
    pub mask_ratio: f32,
    pub use_cls_token: bool,
    pub loss_on_all_patches: bool,
    pub normalize_patch_targets: bool,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig::vit_s16()
    }
}

impl ViTConfig {
    /// Standard ViT-S/16 encoder with a light decoder.
    pub fn vit_s16() -> Self {
        ViTConfig {
            input_size: 224,
            patch_size: 16,
            channels: 3,
            encoder_dim: 384,
            encoder_depth: 12,
            encoder_heads: 6,
            decoder_dim: 192,
            decoder_depth: 2,
            decoder_heads: 4,
            mlp_ratio: 4.0,
            mask_ratio: 0.75,
            use_cls_token: true,
            loss_on_all_patches: false,
            normalize_patch_targets: false,
        }
    }

    /// Desk-scale preset used throughout the test suite: 32-pixel inputs,
    /// 4×4 patch grid, 64-dim encoder of depth 2.
    pub fn tiny() -> Self {
        ViTConfig {
            input_size: 32,
            patch_size: 8,
            channels: 3,
            encoder_dim: 64,
            encoder_depth: 2,
            encoder_heads: 4,
            decoder_dim: 64,
            decoder_depth: 2,
            decoder_heads: 4,
            mlp_ratio: 4.0,
            mask_ratio: 0.75,
            use_cls_token: true,
            loss_on_all_patches: false,
            normalize_patch_targets: false,
        }
    }

    /// Larger desk preset (64-pixel inputs, 8×8 grid, depth 4).
    pub fn tiny64() -> Self {
        ViTConfig {
            input_size: 64,
            encoder_depth: 4,
            ..ViTConfig::tiny()
        }
    }

    pub fn grid_side(&self) -> usize {
        self.input_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    fn mlp_hidden(dim: usize, ratio: f32) -> usize {
        ((dim as f64 * ratio as f64).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::Config(format!(
                "channels must be 3, got {}",
                self.channels
            )));
        }
        if self.patch_size == 0 || self.input_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "input_size {} not divisible by patch_size {}",
                self.input_size, self.patch_size
            )));
        }
        for (what, dim, heads, depth) in [
            ("encoder", self.encoder_dim, self.encoder_heads, self.encoder_depth),
            ("decoder", self.decoder_dim, self.decoder_heads, self.decoder_depth),
        ] {
            if depth == 0 || heads == 0 {
                return Err(Error::Config(format!("{what} depth and heads must be positive")));
            }
            if dim % heads != 0 {
                return Err(Error::Config(format!(
                    "{what}_dim {dim} not divisible by {what}_heads {heads}"
                )));
            }
            if dim % 4 != 0 {
                return Err(Error::Config(format!(
                    "{what}_dim {dim} must be a multiple of 4 for sin-cos positions"
                )));
            }
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::Config(format!(
                "mlp_ratio must be positive, got {}",
                self.mlp_ratio
            )));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!(
                "mask_ratio must lie in (0, 1), got {}",
                self.mask_ratio
            )));
        }
        let n = self.num_patches();
        let m = masked_count(n, self.mask_ratio);
        if m == 0 || m >= n {
            return Err(Error::Config(format!(
                "mask_ratio {} over {n} patches leaves no masked or no visible patch",
                self.mask_ratio
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
struct LinearVars {
    w: Var,
    b: Var,
}

/// Walks `vars` (in parameter-store order) while checking names in debug
/// builds.
struct VarCursor<'a> {
    params: &'a ParamStore,
    vars: &'a [Var],
    pos: usize,
}

impl VarCursor<'_> {
    fn take(&mut self, expected: &str) -> Var {
        debug_assert_eq!(self.params.name(self.pos), expected, "parameter order drift");
        let _ = expected;
        let v = self.vars[self.pos];
        self.pos += 1;
        v
    }

    fn linear(&mut self, prefix: &str) -> LinearVars {
        LinearVars {
            w: self.take(&format!("{prefix}.w")),
            b: self.take(&format!("{prefix}.b")),
        }
    }

    fn block(&mut self, prefix: &str) -> BlockVars {
        BlockVars {
            ln1_g: self.take(&format!("{prefix}.ln1.g")),
            ln1_b: self.take(&format!("{prefix}.ln1.b")),
            q: self.linear(&format!("{prefix}.attn.q")),
            k: self.linear(&format!("{prefix}.attn.k")),
            v: self.linear(&format!("{prefix}.attn.v")),
            o: self.linear(&format!("{prefix}.attn.o")),
            ln2_g: self.take(&format!("{prefix}.ln2.g")),
            ln2_b: self.take(&format!("{prefix}.ln2.b")),
            fc1: self.linear(&format!("{prefix}.mlp.fc1")),
            fc2: self.linear(&format!("{prefix}.mlp.fc2")),
        }
    }
}

#[derive(Clone, Copy)]
struct BlockVars {
    ln1_g: Var,
    ln1_b: Var,
    q: LinearVars,
    k: LinearVars,
    v: LinearVars,
    o: LinearVars,
    ln2_g: Var,
    ln2_b: Var,
    fc1: LinearVars,
    fc2: LinearVars,
}

/// Parameter handles bound onto one tape, in store order.
pub struct MaeVars {
    pub all: Vec<Var>,
    proj: LinearVars,
    cls: Option<Var>,
    mask_token: Var,
    enc_blocks: Vec<BlockVars>,
    enc_norm: (Var, Var),
    dec_embed: LinearVars,
    dec_blocks: Vec<BlockVars>,
    dec_norm: (Var, Var),
    head: LinearVars,
}

/// Per-head CLS→patch attention from the final encoder block.
#[derive(Debug, Clone)]
pub struct AttentionMaps {
    pub grid_h: usize,
    pub grid_w: usize,
    /// One map per head, each `grid_h·grid_w` long, row-major.
    pub heads: Vec<Vec<f32>>,
    /// Elementwise mean over heads.
    pub mean: Vec<f32>,
}

impl AttentionMaps {
    pub fn to_tensor(&self) -> Tensor {
        let n = self.grid_h * self.grid_w;
        let mut data = Vec::with_capacity(self.heads.len() * n);
        for h in &self.heads {
            data.extend_from_slice(h);
        }
        Tensor::new(data, vec![self.heads.len(), n]).expect("map sizes are consistent")
    }
}

/// The MAE: owned parameters plus the fixed positional tables.
#[derive(Debug)]
pub struct MaeModel {
    cfg: ViTConfig,
    params: ParamStore,
    enc_pos: Tensor,
    dec_pos: Tensor,
}

impl MaeModel {
    /// Fresh model with N(0, 0.02²) weights, zero biases, unit norm gains.
    pub fn new(cfg: ViTConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 0.02).expect("valid distribution");
        let mut params = ParamStore::new();
        let mut randn = |shape: Vec<usize>| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|_| normal.sample(&mut rng) as f32).collect();
            Tensor::new(data, shape)
        };

        let d = cfg.encoder_dim;
        let dd = cfg.decoder_dim;
        let pd = cfg.patch_dim();
        params.push("enc.proj.w", randn(vec![pd, d])?)?;
        params.push("enc.proj.b", Tensor::zeros(vec![d])?)?;
        if cfg.use_cls_token {
            params.push("cls", randn(vec![d])?)?;
        }
        params.push("mask_token", randn(vec![dd])?)?;
        let push_block = |params: &mut ParamStore,
                              randn: &mut dyn FnMut(Vec<usize>) -> Result<Tensor>,
                              prefix: String,
                              dim: usize,
                              hidden: usize|
         -> Result<()> {
            params.push(format!("{prefix}.ln1.g"), Tensor::full(vec![dim], 1.0)?)?;
            params.push(format!("{prefix}.ln1.b"), Tensor::zeros(vec![dim])?)?;
            for name in ["q", "k", "v", "o"] {
                params.push(format!("{prefix}.attn.{name}.w"), randn(vec![dim, dim])?)?;
                params.push(format!("{prefix}.attn.{name}.b"), Tensor::zeros(vec![dim])?)?;
            }
            params.push(format!("{prefix}.ln2.g"), Tensor::full(vec![dim], 1.0)?)?;
            params.push(format!("{prefix}.ln2.b"), Tensor::zeros(vec![dim])?)?;
            params.push(format!("{prefix}.mlp.fc1.w"), randn(vec![dim, hidden])?)?;
            params.push(format!("{prefix}.mlp.fc1.b"), Tensor::zeros(vec![hidden])?)?;
            params.push(format!("{prefix}.mlp.fc2.w"), randn(vec![hidden, dim])?)?;
            params.push(format!("{prefix}.mlp.fc2.b"), Tensor::zeros(vec![dim])?)?;
            Ok(())
        };
        let enc_hidden = ViTConfig::mlp_hidden(d, cfg.mlp_ratio);
        for i in 0..cfg.encoder_depth {
            push_block(&mut params, &mut randn, format!("enc.blk{i}"), d, enc_hidden)?;
        }
        params.push("enc.norm.g", Tensor::full(vec![d], 1.0)?)?;
        params.push("enc.norm.b", Tensor::zeros(vec![d])?)?;
        params.push("dec.embed.w", randn(vec![d, dd])?)?;
        params.push("dec.embed.b", Tensor::zeros(vec![dd])?)?;
        let dec_hidden = ViTConfig::mlp_hidden(dd, cfg.mlp_ratio);
        for i in 0..cfg.decoder_depth {
            push_block(&mut params, &mut randn, format!("dec.blk{i}"), dd, dec_hidden)?;
        }
        params.push("dec.norm.g", Tensor::full(vec![dd], 1.0)?)?;
        params.push("dec.norm.b", Tensor::zeros(vec![dd])?)?;
        params.push("dec.head.w", randn(vec![dd, pd])?)?;
        params.push("dec.head.b", Tensor::zeros(vec![pd])?)?;

        let side = cfg.grid_side();
        Ok(MaeModel {
            enc_pos: sincos_pos_embed(side, side, d)?,
            dec_pos: sincos_pos_embed(side, side, dd)?,
            cfg,
            params,
        })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn enc_pos(&self) -> &Tensor {
        &self.enc_pos
    }

    /// Rebuilds a model from a config and a full set of named tensors (the
    /// checkpoint path). Every parameter must be present with its exact
    /// shape; extras are rejected. There is no silent reshape.
    pub fn from_named_tensors(cfg: ViTConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = MaeModel::new(cfg, 0)?;
        if tensors.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model needs {}",
                tensors.len(),
                model.params.len()
            )));
        }
        for (name, tensor) in tensors {
            let idx = (0..model.params.len())
                .find(|&i| model.params.name(i) == name)
                .ok_or_else(|| {
                    Error::Checkpoint(format!("unexpected tensor '{name}' in checkpoint"))
                })?;
            if model.params.tensor(idx).shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' has shape {:?}, model expects {:?}",
                    tensor.shape(),
                    model.params.tensor(idx).shape()
                )));
            }
            model
                .params
                .tensor_mut(idx)
                .data_mut()
                .copy_from_slice(tensor.data());
        }
        Ok(model)
    }

    /// Registers every parameter on `tape` and returns structured handles.
    pub fn bind(&self, tape: &mut Tape) -> MaeVars {
        let vars = self.params.bind(tape);
        self.structure_vars(vars)
    }

    /// Binds parameters as slices of one flat leaf (for whole-model gradient
    /// checks). `flat` must be rank-1 with `params().numel()` elements.
    pub fn bind_from_flat(&self, tape: &mut Tape, flat: Var) -> Result<MaeVars> {
        let mut vars = Vec::with_capacity(self.params.len());
        let mut off = 0;
        for i in 0..self.params.len() {
            let t = self.params.tensor(i);
            let s = tape.slice_rows(flat, off, t.numel())?;
            vars.push(tape.reshape(s, t.shape().to_vec())?);
            off += t.numel();
        }
        Ok(self.structure_vars(vars))
    }

    fn structure_vars(&self, vars: Vec<Var>) -> MaeVars {
        debug_assert_eq!(vars.len(), self.params.len());
        let mut cur = VarCursor {
            params: &self.params,
            vars: &vars,
            pos: 0,
        };
        let proj = cur.linear("enc.proj");
        let cls = self.cfg.use_cls_token.then(|| cur.take("cls"));
        let mask_token = cur.take("mask_token");
        let enc_blocks: Vec<BlockVars> = (0..self.cfg.encoder_depth)
            .map(|i| cur.block(&format!("enc.blk{i}")))
            .collect();
        let enc_norm = (cur.take("enc.norm.g"), cur.take("enc.norm.b"));
        let dec_embed = cur.linear("dec.embed");
        let dec_blocks: Vec<BlockVars> = (0..self.cfg.decoder_depth)
            .map(|i| cur.block(&format!("dec.blk{i}")))
            .collect();
        let dec_norm = (cur.take("dec.norm.g"), cur.take("dec.norm.b"));
        let head = cur.linear("dec.head");
        debug_assert_eq!(cur.pos, vars.len(), "parameters left unbound");
        MaeVars {
            all: vars,
            proj,
            cls,
            mask_token,
            enc_blocks,
            enc_norm,
            dec_embed,
            dec_blocks,
            dec_norm,
            head,
        }
    }

    fn check_plan(&self, grid: &PatchGrid, plan: &MaskPlan) -> Result<()> {
        let n = grid.num_patches();
        if plan.num_patches() != n {
            return Err(Error::InvalidParameter(format!(
                "mask plan covers {} patches, grid has {n}",
                plan.num_patches()
            )));
        }
        if plan
            .visible_idx
            .iter()
            .chain(&plan.masked_idx)
            .any(|&i| i >= n)
        {
            return Err(Error::InvalidParameter(
                "mask plan index out of range for grid".into(),
            ));
        }
        Ok(())
    }

    /// Encoder forward over the visible patches of `grid` (in the order the
    /// plan lists them), CLS prepended when configured. When `capture` is
    /// given it receives the final block's per-head attention rows.
    pub fn encode_visible_on(
        &self,
        tape: &mut Tape,
        vars: &MaeVars,
        grid: &PatchGrid,
        plan: &MaskPlan,
        mut capture: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        self.check_plan(grid, plan)?;
        if plan.visible_idx.is_empty() {
            return Err(Error::InvalidParameter("mask plan has no visible patches".into()));
        }
        let patches = tape.constant(
            grid.patches.data().to_vec(),
            grid.patches.shape().to_vec(),
        )?;
        let visible = tape.gather_rows(patches, &plan.visible_idx)?;
        let mut x = linear(tape, visible, vars.proj)?;
        let pos = self.pos_rows(&self.enc_pos, &plan.visible_idx);
        let pos = tape.constant(pos, vec![plan.visible_idx.len(), self.cfg.encoder_dim])?;
        x = tape.add(x, pos)?;
        if let Some(cls) = vars.cls {
            let cls_row = tape.reshape(cls, vec![1, self.cfg.encoder_dim])?;
            x = tape.concat_rows(&[cls_row, x])?;
        }
        let last = self.cfg.encoder_depth - 1;
        for (i, blk) in vars.enc_blocks.iter().enumerate() {
            let cap = if i == last { capture.as_deref_mut() } else { None };
            x = block_forward(tape, x, blk, self.cfg.encoder_heads, cap)?;
        }
        tape.layer_norm(x, vars.enc_norm.0, vars.enc_norm.1, LN_EPS)
    }

    fn pos_rows(&self, table: &Tensor, indices: &[usize]) -> Vec<f32> {
        let dim = table.shape()[1];
        let mut out = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            out.extend_from_slice(&table.data()[i * dim..(i + 1) * dim]);
        }
        out
    }

    /// Decoder input assembly: projected visible latents scattered to their
    /// original positions, mask tokens at masked positions, positions added,
    /// CLS latent (if any) prepended. Split out so insertion can be verified
    /// directly.
    fn assemble_decoder_tokens(
        &self,
        tape: &mut Tape,
        vars: &MaeVars,
        latents: Var,
        plan: &MaskPlan,
    ) -> Result<Var> {
        let n = plan.num_patches();
        let rows = tape.shape(latents)[0];
        let expected = plan.visible_idx.len() + usize::from(self.cfg.use_cls_token);
        if rows != expected {
            return Err(Error::InvalidParameter(format!(
                "latents have {rows} rows, plan expects {expected}"
            )));
        }
        let lat = linear(tape, latents, vars.dec_embed)?;
        let (cls_lat, patch_lat) = if self.cfg.use_cls_token {
            let c = tape.slice_rows(lat, 0, 1)?;
            let p = tape.slice_rows(lat, 1, rows - 1)?;
            (Some(c), p)
        } else {
            (None, lat)
        };
        let scattered = tape.scatter_rows(patch_lat, &plan.visible_idx, n)?;
        let full = if plan.masked_idx.is_empty() {
            scattered
        } else {
            let mask_rows = tape.broadcast_row(vars.mask_token, plan.masked_idx.len())?;
            let mask_sc = tape.scatter_rows(mask_rows, &plan.masked_idx, n)?;
            tape.add(scattered, mask_sc)?
        };
        let pos = tape.constant(self.dec_pos.data().to_vec(), self.dec_pos.shape().to_vec())?;
        let full = tape.add(full, pos)?;
        match cls_lat {
            Some(c) => tape.concat_rows(&[c, full]),
            None => Ok(full),
        }
    }

    /// Decoder forward: returns predicted pixels, one row per patch, ordered
    /// by original patch index.
    pub fn decode_full_on(
        &self,
        tape: &mut Tape,
        vars: &MaeVars,
        latents: Var,
        plan: &MaskPlan,
    ) -> Result<Var> {
        let n = plan.num_patches();
        let mut x = self.assemble_decoder_tokens(tape, vars, latents, plan)?;
        for blk in &vars.dec_blocks {
            x = block_forward(tape, x, blk, self.cfg.decoder_heads, None)?;
        }
        let x = tape.layer_norm(x, vars.dec_norm.0, vars.dec_norm.1, LN_EPS)?;
        let out = linear(tape, x, vars.head)?;
        if self.cfg.use_cls_token {
            tape.slice_rows(out, 1, n)
        } else {
            Ok(out)
        }
    }

    /// Reconstruction loss on the tape: MSE over masked patches (or all
    /// patches when `loss_on_all_patches`), honoring target normalization.
    pub fn mae_loss_on(
        &self,
        tape: &mut Tape,
        pred: Var,
        target: &PatchGrid,
        plan: &MaskPlan,
    ) -> Result<Var> {
        let pd = target.patch_dim();
        let target_tensor = if self.cfg.normalize_patch_targets {
            normalized_patch_targets(target)?.patches
        } else {
            target.patches.clone()
        };
        let t = tape.constant(target_tensor.into_data(), vec![target.num_patches(), pd])?;
        if self.cfg.loss_on_all_patches {
            tape.mse(pred, t, None)
        } else {
            if plan.masked_idx.is_empty() {
                return Err(Error::DegenerateInput(
                    "mae_loss over an empty masked set".into(),
                ));
            }
            let mut idx = Vec::with_capacity(plan.masked_idx.len() * pd);
            for &r in &plan.masked_idx {
                idx.extend(r * pd..(r + 1) * pd);
            }
            tape.mse(pred, t, Some(&idx))
        }
    }

    /// Inference encoder forward (no gradients).
    pub fn encode_visible(&self, grid: &PatchGrid, plan: &MaskPlan) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let out = self.encode_visible_on(&mut tape, &vars, grid, plan, None)?;
        Ok(tape.tensor(out))
    }

    /// Inference decoder forward from encoder latents.
    pub fn decode_full(&self, latents: &Tensor, plan: &MaskPlan) -> Result<PatchGrid> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let lat = tape.constant(latents.data().to_vec(), latents.shape().to_vec())?;
        let out = self.decode_full_on(&mut tape, &vars, lat, plan)?;
        Ok(PatchGrid {
            grid_h: self.cfg.grid_side(),
            grid_w: self.cfg.grid_side(),
            patch_size: self.cfg.patch_size,
            channels: self.cfg.channels,
            patches: tape.tensor(out),
        })
    }

    /// One optimizer step over a batch of images. Each image gets its own
    /// mask plan from the `(base_seed, step·batch + slot)` stream. Per-image
    /// gradients are computed (in parallel when `threads > 1`), then reduced
    /// in slot order, so results do not depend on scheduling.
    pub fn pretrain_step(
        &mut self,
        images: &[Tensor],
        step: u64,
        base_seed: u64,
        opt: &mut AdamW,
        threads: usize,
    ) -> Result<f32> {
        if images.is_empty() {
            return Err(Error::Training("pretrain_step needs a non-empty batch".into()));
        }
        let batch = images.len();
        let per_image = indexed_map(batch, threads, |slot| {
            let image = &images[slot];
            let grid = patchify(image, self.cfg.patch_size)?;
            if grid.num_patches() != self.cfg.num_patches() || grid.patch_dim() != self.cfg.patch_dim() {
                return Err(Error::Geometry(format!(
                    "image shape {:?} does not match configured input size {}",
                    image.shape(),
                    self.cfg.input_size
                )));
            }
            let plan_seed = stream_seed(base_seed, step * batch as u64 + slot as u64);
            let plan = random_mask(grid.num_patches(), self.cfg.mask_ratio, plan_seed)?;
            let mut tape = Tape::new();
            let vars = self.bind(&mut tape);
            let latents = self.encode_visible_on(&mut tape, &vars, &grid, &plan, None)?;
            let pred = self.decode_full_on(&mut tape, &vars, latents, &plan)?;
            let loss = self.mae_loss_on(&mut tape, pred, &grid, &plan)?;
            let loss_value = tape.value(loss)[0];
            let grads = tape.backward(loss)?;
            let grad_vecs = collect_param_grads(&tape, &vars, &grads);
            Ok((loss_value, grad_vecs))
        })?;

        let mut mean_loss = 0.0f64;
        let mut summed: Vec<Vec<f32>> = (0..self.params.len())
            .map(|i| vec![0.0f32; self.params.tensor(i).numel()])
            .collect();
        let mut acc64: Vec<Vec<f64>> = summed
            .iter()
            .map(|g| vec![0.0f64; g.len()])
            .collect();
        for (loss, grads) in &per_image {
            mean_loss += *loss as f64;
            for (i, g) in grads.iter().enumerate() {
                for (a, v) in acc64[i].iter_mut().zip(g) {
                    *a += *v as f64;
                }
            }
        }
        mean_loss /= batch as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss {mean_loss} at step {step} (lr {})",
                opt.cfg.lr
            )));
        }
        for (dst, src) in summed.iter_mut().zip(&acc64) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (*s / batch as f64) as f32;
            }
        }
        opt.step(&mut self.params, &summed)?;
        Ok(mean_loss as f32)
    }

    /// Per-head CLS→patch attention of the final encoder block on a full
    /// (unmasked) forward.
    pub fn attention_maps(&self, image: &Tensor) -> Result<AttentionMaps> {
        if !self.cfg.use_cls_token {
            return Err(Error::Config(
                "attention maps require the CLS token to be enabled".into(),
            ));
        }
        let grid = patchify(image, self.cfg.patch_size)?;
        if grid.num_patches() != self.cfg.num_patches() {
            return Err(Error::Geometry(format!(
                "image shape {:?} does not match configured input size {}",
                image.shape(),
                self.cfg.input_size
            )));
        }
        let plan = MaskPlan::full_visibility(grid.num_patches());
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let mut probs: Vec<Var> = Vec::new();
        self.encode_visible_on(&mut tape, &vars, &grid, &plan, Some(&mut probs))?;
        let n = grid.num_patches();
        let tokens = n + 1;
        let mut heads = Vec::with_capacity(probs.len());
        for &p in &probs {
            debug_assert_eq!(tape.shape(p), &[tokens, tokens]);
            // CLS row, patch columns only.
            let row = &tape.value(p)[1..tokens];
            heads.push(row.to_vec());
        }
        let mut mean = vec![0.0f32; n];
        for h in &heads {
            for (m, v) in mean.iter_mut().zip(h) {
                *m += v / heads.len() as f32;
            }
        }
        Ok(AttentionMaps {
            grid_h: grid.grid_h,
            grid_w: grid.grid_w,
            heads,
            mean,
        })
    }
}

/// Per-patch target normalization: each row to zero mean, unit (population)
/// variance, with a 1e-6 variance floor.
pub fn normalized_patch_targets(grid: &PatchGrid) -> Result<PatchGrid> {
    let pd = grid.patch_dim();
    let mut data = grid.patches.data().to_vec();
    for r in 0..grid.num_patches() {
        let row = &mut data[r * pd..(r + 1) * pd];
        let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / pd as f64;
        let var: f64 = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / pd as f64;
        let inv = 1.0 / (var + 1e-6).sqrt();
        for v in row.iter_mut() {
            *v = ((*v as f64 - mean) * inv) as f32;
        }
    }
    Ok(PatchGrid {
        grid_h: grid.grid_h,
        grid_w: grid.grid_w,
        patch_size: grid.patch_size,
        channels: grid.channels,
        patches: Tensor::new(data, vec![grid.num_patches(), pd])?,
    })
}

/// Reconstruction error between two patch grids: mean squared difference
/// over the masked patches (or all patches), in f64.
pub fn mae_loss(
    pred: &PatchGrid,
    target: &PatchGrid,
    plan: &MaskPlan,
    loss_on_all_patches: bool,
) -> Result<f64> {
    if pred.patches.shape() != target.patches.shape() {
        return Err(Error::ShapeMismatch {
            op: "mae_loss",
            left: pred.patches.shape().to_vec(),
            right: target.patches.shape().to_vec(),
        });
    }
    let n = pred.num_patches();
    if plan.num_patches() != n {
        return Err(Error::InvalidParameter(format!(
            "mask plan covers {} patches, grids have {n}",
            plan.num_patches()
        )));
    }
    let rows: &[usize] = if loss_on_all_patches {
        &[]
    } else {
        if plan.masked_idx.is_empty() {
            return Err(Error::DegenerateInput("mae_loss over an empty masked set".into()));
        }
        &plan.masked_idx
    };
    let pd = pred.patch_dim();
    let p = pred.patches.data();
    let t = target.patches.data();
    let mut acc = 0.0f64;
    let mut count = 0usize;
    let all_rows: Vec<usize> = (0..n).collect();
    let rows = if loss_on_all_patches { &all_rows } else { rows };
    for &r in rows {
        for i in r * pd..(r + 1) * pd {
            let d = p[i] as f64 - t[i] as f64;
            acc += d * d;
        }
        count += pd;
    }
    Ok(acc / count as f64)
}

fn collect_param_grads(tape: &Tape, vars: &MaeVars, grads: &Gradients) -> Vec<Vec<f32>> {
    vars.all
        .iter()
        .map(|&v| grads.or_zeros(v, tape.value(v).len()))
        .collect()
}

fn linear(tape: &mut Tape, x: Var, l: LinearVars) -> Result<Var> {
    let h = tape.matmul(x, l.w)?;
    tape.add_row(h, l.b)
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
fn block_forward(
    tape: &mut Tape,
    x: Var,
    blk: &BlockVars,
    heads: usize,
    mut capture: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let dim = tape.shape(x)[1];
    let dh = dim / heads;
    let h = tape.layer_norm(x, blk.ln1_g, blk.ln1_b, LN_EPS)?;
    let q = linear(tape, h, blk.q)?;
    let k = linear(tape, h, blk.k)?;
    let v = linear(tape, h, blk.v)?;
    let mut ctx_parts = Vec::with_capacity(heads);
    for head in 0..heads {
        let qh = tape.slice_cols(q, head * dh, dh)?;
        let kh = tape.slice_cols(k, head * dh, dh)?;
        let vh = tape.slice_cols(v, head * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, 1.0 / (dh as f32).sqrt())?;
        let probs = tape.softmax(scaled, 1)?;
        if let Some(cap) = capture.as_deref_mut() {
            cap.push(probs);
        }
        ctx_parts.push(tape.matmul(probs, vh)?);
    }
    let ctx = tape.concat_cols(&ctx_parts)?;
    let attn_out = linear(tape, ctx, blk.o)?;
    let x = tape.add(x, attn_out)?;
    let h2 = tape.layer_norm(x, blk.ln2_g, blk.ln2_b, LN_EPS)?;
    let m = linear(tape, h2, blk.fc1)?;
    let g = tape.gelu(m)?;
    let m2 = linear(tape, g, blk.fc2)?;
    tape.add(x, m2)
}

/// Writes one 8-bit grayscale PNG per head plus the head-mean, min-max
/// normalized per map and nearest-neighbor upscaled to `input_size`.
pub fn export_attention_maps(
    maps: &AttentionMaps,
    input_size: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut paths = Vec::new();
    let export = |name: String, map: &[f32]| -> Result<PathBuf> {
        let path = out_dir.join(name);
        let img = render_map(map, maps.grid_h, maps.grid_w, input_size);
        img.save(&path).map_err(|e| Error::image(&path, e))?;
        Ok(path)
    };
    for (i, head) in maps.heads.iter().enumerate() {
        paths.push(export(format!("head_{i:02}.png"), head)?);
    }
    paths.push(export("mean.png".to_string(), &maps.mean)?);
    Ok(paths)
}

fn render_map(map: &[f32], grid_h: usize, grid_w: usize, input_size: usize) -> image::GrayImage {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in map {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = (hi - lo).max(f32::MIN_POSITIVE);
    image::GrayImage::from_fn(input_size as u32, input_size as u32, |x, y| {
        let gy = (y as usize * grid_h) / input_size;
        let gx = (x as usize * grid_w) / input_size;
        let v = map[gy * grid_w + gx];
        let norm = if hi == lo { 0.0 } else { (v - lo) / span };
        image::Luma([(norm * 255.0).round() as u8])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, AdamWConfig};
    use rand::{Rng, SeedableRng};

    fn toy_config() -> ViTConfig {
        // 2×2 grid, dim 16, depth 1: the end-to-end gradient-check geometry.
        ViTConfig {
            input_size: 8,
            patch_size: 4,
            channels: 3,
            encoder_dim: 16,
            encoder_depth: 1,
            encoder_heads: 2,
            decoder_dim: 16,
            decoder_depth: 1,
            decoder_heads: 2,
            mlp_ratio: 2.0,
            mask_ratio: 0.75,
            use_cls_token: true,
            loss_on_all_patches: false,
            normalize_patch_targets: false,
        }
    }

    fn random_image(seed: u64, side: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..side * side * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::new(data, vec![side, side, 3]).unwrap()
    }

    #[test]
    fn config_validation_catches_bad_geometry() {
        let mut cfg = ViTConfig::tiny();
        cfg.input_size = 30;
        assert!(cfg.validate().is_err());
        let mut cfg = ViTConfig::tiny();
        cfg.encoder_heads = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = ViTConfig::tiny();
        cfg.mask_ratio = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = ViTConfig::tiny();
        cfg.mask_ratio = 0.01; // rounds to zero masked patches
        assert!(cfg.validate().is_err());
        assert!(ViTConfig::tiny().validate().is_ok());
        assert!(ViTConfig::vit_s16().validate().is_ok());
    }

    #[test]
    fn encoder_output_row_count_matches_contract() {
        let cfg = toy_config();
        let model = MaeModel::new(cfg.clone(), 1).unwrap();
        let img = random_image(2, cfg.input_size);
        let grid = patchify(&img, cfg.patch_size).unwrap();
        let plan = random_mask(grid.num_patches(), cfg.mask_ratio, 3).unwrap();
        let out = model.encode_visible(&grid, &plan).unwrap();
        assert_eq!(out.shape(), &[plan.visible_idx.len() + 1, cfg.encoder_dim]);

        let mut no_cls = cfg;
        no_cls.use_cls_token = false;
        let model = MaeModel::new(no_cls.clone(), 1).unwrap();
        let out = model.encode_visible(&grid, &plan).unwrap();
        assert_eq!(out.shape(), &[plan.visible_idx.len(), no_cls.encoder_dim]);
    }

    #[test]
    fn positional_tables_identical_across_instances() {
        let a = MaeModel::new(ViTConfig::tiny(), 1).unwrap();
        let b = MaeModel::new(ViTConfig::tiny(), 999).unwrap();
        let same = a
            .enc_pos
            .data()
            .iter()
            .zip(b.enc_pos.data())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same);
    }

    #[test]
    fn encode_is_permutation_equivariant_in_visible_order() {
        let mut cfg = toy_config();
        cfg.use_cls_token = false;
        let model = MaeModel::new(cfg.clone(), 5).unwrap();
        let img = random_image(6, cfg.input_size);
        let grid = patchify(&img, cfg.patch_size).unwrap();
        let sorted = MaskPlan {
            visible_idx: vec![0, 1, 3],
            masked_idx: vec![2],
            seed: 0,
        };
        let permuted = MaskPlan {
            visible_idx: vec![3, 0, 1],
            masked_idx: vec![2],
            seed: 0,
        };
        let a = model.encode_visible(&grid, &sorted).unwrap();
        let b = model.encode_visible(&grid, &permuted).unwrap();
        // Row of patch p in `b` sits where the permuted order put it.
        let d = cfg.encoder_dim;
        for (row_sorted, &patch) in sorted.visible_idx.iter().enumerate() {
            let row_perm = permuted.visible_idx.iter().position(|&q| q == patch).unwrap();
            for j in 0..d {
                let x = a.data()[row_sorted * d + j];
                let y = b.data()[row_perm * d + j];
                assert!((x - y).abs() < 1e-5, "patch {patch} dim {j}: {x} vs {y}");
            }
        }
    }

    /// Independent f64 forward of the full-visibility encoder, straight from
    /// the parameter tensors.
    fn reference_encoder_f64(model: &MaeModel, grid: &PatchGrid) -> Vec<f64> {
        let cfg = model.config();
        let d = cfg.encoder_dim;
        let n = grid.num_patches();
        let get = |name: &str| model.params().get(name).unwrap();
        let to64 = |t: &Tensor| -> Vec<f64> { t.data().iter().map(|&v| v as f64).collect() };

        let matmul = |a: &[f64], b: &[f64], m: usize, k: usize, nn: usize| -> Vec<f64> {
            let mut out = vec![0.0; m * nn];
            for i in 0..m {
                for j in 0..nn {
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += a[i * k + p] * b[p * nn + j];
                    }
                    out[i * nn + j] = acc;
                }
            }
            out
        };
        let add_row = |x: &mut Vec<f64>, row: &[f64]| {
            let c = row.len();
            for (i, v) in x.iter_mut().enumerate() {
                *v += row[i % c];
            }
        };
        let layer_norm = |x: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
            let c = g.len();
            let rows = x.len() / c;
            let mut out = vec![0.0; x.len()];
            for r in 0..rows {
                let row = &x[r * c..(r + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + LN_EPS as f64).sqrt();
                for j in 0..c {
                    out[r * c + j] = (row[j] - mean) * inv * g[j] + b[j];
                }
            }
            out
        };

        // Patch projection + positions.
        let pd = cfg.patch_dim();
        let mut x = matmul(&to64(&grid.patches), &to64(get("enc.proj.w")), n, pd, d);
        add_row(&mut x, &to64(get("enc.proj.b")));
        let pos = to64(&model.enc_pos);
        for (i, v) in x.iter_mut().enumerate() {
            *v += pos[i];
        }
        // CLS.
        let mut tokens = to64(get("cls"));
        tokens.extend_from_slice(&x);
        let t = n + 1;

        for blk in 0..cfg.encoder_depth {
            let p = |s: &str| format!("enc.blk{blk}.{s}");
            let h = layer_norm(&tokens, &to64(get(&p("ln1.g"))), &to64(get(&p("ln1.b"))));
            let mut q = matmul(&h, &to64(get(&p("attn.q.w"))), t, d, d);
            add_row(&mut q, &to64(get(&p("attn.q.b"))));
            let mut k = matmul(&h, &to64(get(&p("attn.k.w"))), t, d, d);
            add_row(&mut k, &to64(get(&p("attn.k.b"))));
            let mut v = matmul(&h, &to64(get(&p("attn.v.w"))), t, d, d);
            add_row(&mut v, &to64(get(&p("attn.v.b"))));
            let heads = cfg.encoder_heads;
            let dh = d / heads;
            let mut ctx = vec![0.0; t * d];
            for head in 0..heads {
                for i in 0..t {
                    // scores for token i against all tokens, this head.
                    let mut scores = vec![0.0; t];
                    for j in 0..t {
                        let mut acc = 0.0;
                        for e in 0..dh {
                            acc += q[i * d + head * dh + e] * k[j * d + head * dh + e];
                        }
                        scores[j] = acc / (dh as f64).sqrt();
                    }
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                    for j in 0..t {
                        let w = (scores[j] - max).exp() / sum;
                        for e in 0..dh {
                            ctx[i * d + head * dh + e] += w * v[j * d + head * dh + e];
                        }
                    }
                }
            }
            let mut attn = matmul(&ctx, &to64(get(&p("attn.o.w"))), t, d, d);
            add_row(&mut attn, &to64(get(&p("attn.o.b"))));
            for i in 0..t * d {
                tokens[i] += attn[i];
            }
            let h2 = layer_norm(&tokens, &to64(get(&p("ln2.g"))), &to64(get(&p("ln2.b"))));
            let hidden = get(&p("mlp.fc1.b")).numel();
            let mut m = matmul(&h2, &to64(get(&p("mlp.fc1.w"))), t, d, hidden);
            add_row(&mut m, &to64(get(&p("mlp.fc1.b"))));
            for v in m.iter_mut() {
                *v = crate::tensor::tape_gelu_f64(*v);
            }
            let mut m2 = matmul(&m, &to64(get(&p("mlp.fc2.w"))), t, hidden, d);
            add_row(&mut m2, &to64(get(&p("mlp.fc2.b"))));
            for i in 0..t * d {
                tokens[i] += m2[i];
            }
        }
        layer_norm(&tokens, &to64(get("enc.norm.g")), &to64(get("enc.norm.b")))
    }

    #[test]
    fn zero_masking_matches_independent_reference_forward() {
        let cfg = toy_config();
        let model = MaeModel::new(cfg.clone(), 11).unwrap();
        let img = random_image(12, cfg.input_size);
        let grid = patchify(&img, cfg.patch_size).unwrap();
        let plan = MaskPlan::full_visibility(grid.num_patches());

        let out = model.encode_visible(&grid, &plan).unwrap();
        let reference = reference_encoder_f64(&model, &grid);
        assert_eq!(out.numel(), reference.len());
        for (i, (&got, want)) in out.data().iter().zip(&reference).enumerate() {
            assert!(
                (got as f64 - want).abs() < 1e-4,
                "token element {i}: {got} vs {want}"
            );
        }
        // The f64 replay of the same graph must agree to oracle precision.
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let enc = model
            .encode_visible_on(&mut tape, &vars, &grid, &plan, None)
            .unwrap();
        let replay = tape.replay_f64_vec(&[], enc).unwrap();
        for (i, (got, want)) in replay.iter().zip(&reference).enumerate() {
            assert!((got - want).abs() < 1e-9, "element {i}: {got} vs {want}");
        }
    }

    #[test]
    fn decoder_zeroed_emits_head_bias() {
        let cfg = toy_config();
        let mut model = MaeModel::new(cfg.clone(), 21).unwrap();
        // Zero every decoder-side parameter, then set the head bias.
        let bias_value = 0.37f32;
        for i in 0..model.params().len() {
            let name = model.params().name(i).to_string();
            if name.starts_with("dec.") || name == "mask_token" {
                model.params_mut().tensor_mut(i).data_mut().fill(0.0);
            }
            if name == "dec.head.b" {
                model.params_mut().tensor_mut(i).data_mut().fill(bias_value);
            }
        }
        let img = random_image(22, cfg.input_size);
        let grid = patchify(&img, cfg.patch_size).unwrap();
        let plan = random_mask(grid.num_patches(), cfg.mask_ratio, 23).unwrap();
        let latents = model.encode_visible(&grid, &plan).unwrap();
        let pred = model.decode_full(&latents, &plan).unwrap();
        assert_eq!(
            pred.patches.shape(),
            &[grid.num_patches(), grid.patch_dim()]
        );
        for (i, &v) in pred.patches.data().iter().enumerate() {
            assert!((v - bias_value).abs() < 1e-6, "element {i}: {v}");
        }
    }

    #[test]
    fn decoder_insertion_places_mask_tokens_at_masked_indices() {
        let cfg = toy_config();
        let model = MaeModel::new(cfg.clone(), 31).unwrap();
        let img = random_image(32, cfg.input_size);
        let grid = patchify(&img, cfg.patch_size).unwrap();
        for seed in [1u64, 2, 3] {
            let plan = random_mask(grid.num_patches(), cfg.mask_ratio, seed).unwrap();
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let latents = model
                .encode_visible_on(&mut tape, &vars, &grid, &plan, None)
                .unwrap();
            let toks = model
                .assemble_decoder_tokens(&mut tape, &vars, latents, &plan)
                .unwrap();
            let dd = cfg.decoder_dim;
            let mask_token = model.params().get("mask_token").unwrap().data();
            let pos = model.dec_pos.data();
            let v = tape.value(toks);
            // Token rows offset by 1 for CLS.
            for &m in &plan.masked_idx {
                for j in 0..dd {
                    let expect = mask_token[j] + pos[m * dd + j];
                    let got = v[(m + 1) * dd + j];
                    assert!(
                        (got - expect).abs() < 1e-6,
                        "masked row {m} dim {j}: {got} vs {expect}"
                    );
                }
            }
            // Visible rows must differ from the mask token embedding.
            for &p in &plan.visible_idx {
                let mut diff = 0.0f64;
                for j in 0..dd {
                    let expect_mask = mask_token[j] + pos[p * dd + j];
                    diff += (v[(p + 1) * dd + j] as f64 - expect_mask as f64).abs();
                }
                assert!(diff > 1e-3, "visible row {p} looks like a mask token");
            }
        }
    }

    #[test]
    fn mae_loss_examples() {
        let cfg = toy_config();
        let img = random_image(41, cfg.input_size);
        let grid = patchify(&img, cfg.patch_size).unwrap();
        let plan = random_mask(grid.num_patches(), 0.75, 42).unwrap();

        // pred == target → 0.
        assert_eq!(mae_loss(&grid, &grid, &plan, false).unwrap(), 0.0);

        // Constant error 1 on masked patches, garbage on visible → exactly 1.
        let mut pred = grid.clone();
        {
            let pd = pred.patch_dim();
            let data = pred.patches.data_mut();
            for &r in &plan.masked_idx {
                for i in r * pd..(r + 1) * pd {
                    data[i] += 1.0;
                }
            }
            for &r in &plan.visible_idx {
                for i in r * pd..(r + 1) * pd {
                    data[i] = -7.5;
                }
            }
        }
        let loss = mae_loss(&pred, &grid, &plan, false).unwrap();
        assert!((loss - 1.0).abs() < 1e-6, "loss = {loss}");

        // Random instance vs an explicit loop oracle.
        let other = patchify(&random_image(43, cfg.input_size), cfg.patch_size).unwrap();
        let loss = mae_loss(&other, &grid, &plan, false).unwrap();
        let pd = grid.patch_dim();
        let mut acc = 0.0f64;
        for &r in &plan.masked_idx {
            for i in r * pd..(r + 1) * pd {
                acc += (other.patches.data()[i] as f64 - grid.patches.data()[i] as f64).powi(2);
            }
        }
        let oracle = acc / (plan.masked_idx.len() * pd) as f64;
        assert!((loss - oracle).abs() < 1e-6);

        // Empty masked set is degenerate.
        let full = MaskPlan::full_visibility(grid.num_patches());
        assert!(mae_loss(&grid, &grid, &full, false).is_err());
        assert!(mae_loss(&grid, &grid, &full, true).is_ok());
    }

    #[test]
    fn training_loss_ignores_visible_pixels_exactly() {
        let cfg = toy_config();
        let model = MaeModel::new(cfg.clone(), 51).unwrap();
        let img = random_image(52, cfg.input_size);
        let plan_seed = 53;

        let loss_of = |image: &Tensor| -> f32 {
            let grid = patchify(image, cfg.patch_size).unwrap();
            let plan = random_mask(grid.num_patches(), cfg.mask_ratio, plan_seed).unwrap();
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            // Encode the *original* image's visible patches but compare the
            // prediction against the perturbed target: only masked targets
            // may matter.
            let latents = model
                .encode_visible_on(&mut tape, &vars, &grid, &plan, None)
                .unwrap();
            let pred = model.decode_full_on(&mut tape, &vars, latents, &plan).unwrap();
            let loss = model.mae_loss_on(&mut tape, pred, &grid, &plan).unwrap();
            tape.value(loss)[0]
        };

        let base = loss_of(&img);
        // Perturb pixels inside visible patches only.
        let grid = patchify(&img, cfg.patch_size).unwrap();
        let plan = random_mask(grid.num_patches(), cfg.mask_ratio, plan_seed).unwrap();
        let mut perturbed_grid = grid.clone();
        {
            let pd = perturbed_grid.patch_dim();
            let data = perturbed_grid.patches.data_mut();
            for &r in &plan.visible_idx {
                for i in r * pd..(r + 1) * pd {
                    data[i] = 0.123;
                }
            }
        }
        // Rebuild an image whose visible patches changed. The encoder input
        // changes, so run the loss with the original latents but perturbed
        // targets: mae_loss_on must not read visible target pixels.
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let latents = model
            .encode_visible_on(&mut tape, &vars, &grid, &plan, None)
            .unwrap();
        let pred = model.decode_full_on(&mut tape, &vars, latents, &plan).unwrap();
        let loss = model
            .mae_loss_on(&mut tape, pred, &perturbed_grid, &plan)
            .unwrap();
        assert_eq!(tape.value(loss)[0].to_bits(), base.to_bits());
    }

    #[test]
    fn pretrain_step_is_finite_and_deterministic() {
        let cfg = toy_config();
        let images: Vec<Tensor> = (0..4).map(|i| random_image(60 + i, cfg.input_size)).collect();
        let run = |threads: usize| -> Vec<f32> {
            let mut model = MaeModel::new(cfg.clone(), 61).unwrap();
            let mut opt = AdamW::new(AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            })
            .unwrap();
            (0..5)
                .map(|step| model.pretrain_step(&images, step, 62, &mut opt, threads).unwrap())
                .collect()
        };
        let a = run(1);
        assert!(a.iter().all(|l| l.is_finite() && *l > 0.0));
        let b = run(1);
        let c = run(4);
        let bits = |v: &Vec<f32>| -> Vec<u32> { v.iter().map(|x| x.to_bits()).collect() };
        assert_eq!(bits(&a), bits(&b), "same-seed runs must be bit-identical");
        assert_eq!(bits(&a), bits(&c), "thread count must not change results");
    }

    #[test]
    fn end_to_end_gradient_check_on_toy_model() {
        let cfg = toy_config();
        let model = MaeModel::new(cfg.clone(), 71).unwrap();
        let img = random_image(72, cfg.input_size);
        let grid = patchify(&img, cfg.patch_size).unwrap();
        let plan = random_mask(grid.num_patches(), cfg.mask_ratio, 73).unwrap();
        let flat = Tensor::new(model.params().flatten(), vec![model.params().numel()]).unwrap();
        let err = grad_check(
            |tape, theta| {
                let vars = model.bind_from_flat(tape, theta)?;
                let latents = model.encode_visible_on(tape, &vars, &grid, &plan, None)?;
                let pred = model.decode_full_on(tape, &vars, latents, &plan)?;
                model.mae_loss_on(tape, pred, &grid, &plan)
            },
            &flat,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "end-to-end grad check error {err}");
    }

    #[test]
    fn attention_maps_contract() {
        let cfg = toy_config();
        let model = MaeModel::new(cfg.clone(), 81).unwrap();
        let img = random_image(82, cfg.input_size);
        let maps = model.attention_maps(&img).unwrap();
        assert_eq!(maps.heads.len(), cfg.encoder_heads);
        assert_eq!(maps.grid_h * maps.grid_w, cfg.num_patches());
        for h in &maps.heads {
            assert_eq!(h.len(), cfg.num_patches());
        }
        let t = maps.to_tensor();
        assert_eq!(t.shape(), &[cfg.encoder_heads, cfg.num_patches()]);

        let mut no_cls = cfg;
        no_cls.use_cls_token = false;
        let model = MaeModel::new(no_cls, 81).unwrap();
        match model.attention_maps(&img) {
            Err(Error::Config(_)) => {}
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn attention_softmax_rows_sum_to_one() {
        let cfg = toy_config();
        let model = MaeModel::new(cfg.clone(), 91).unwrap();
        let img = random_image(92, cfg.input_size);
        let grid = patchify(&img, cfg.patch_size).unwrap();
        let plan = MaskPlan::full_visibility(grid.num_patches());
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let mut probs = Vec::new();
        model
            .encode_visible_on(&mut tape, &vars, &grid, &plan, Some(&mut probs))
            .unwrap();
        assert_eq!(probs.len(), cfg.encoder_heads);
        let t = grid.num_patches() + 1;
        for &p in &probs {
            let v = tape.value(p);
            for r in 0..t {
                let s: f64 = v[r * t..(r + 1) * t].iter().map(|&x| x as f64).sum();
                assert!((s - 1.0).abs() < 1e-6, "row {r} sums to {s}");
            }
        }
    }

    #[test]
    fn identical_keys_give_uniform_attention() {
        let cfg = toy_config();
        let mut model = MaeModel::new(cfg.clone(), 101).unwrap();
        // Zero the last block's key projection: every key equals its bias.
        let last = cfg.encoder_depth - 1;
        for suffix in ["w", "b"] {
            let name = format!("enc.blk{last}.attn.k.{suffix}");
            let idx = (0..model.params().len())
                .find(|&i| model.params().name(i) == name)
                .unwrap();
            model.params_mut().tensor_mut(idx).data_mut().fill(0.0);
        }
        let img = random_image(102, cfg.input_size);
        let maps = model.attention_maps(&img).unwrap();
        let tokens = (cfg.num_patches() + 1) as f32;
        for (h, head) in maps.heads.iter().enumerate() {
            for (i, &v) in head.iter().enumerate() {
                assert!(
                    (v - 1.0 / tokens).abs() < 1e-6,
                    "head {h} patch {i}: {v} vs uniform {}",
                    1.0 / tokens
                );
            }
        }
    }

    #[test]
    fn normalized_targets_have_zero_mean_unit_variance() {
        let cfg = toy_config();
        let img = random_image(111, cfg.input_size);
        let grid = patchify(&img, cfg.patch_size).unwrap();
        let normed = normalized_patch_targets(&grid).unwrap();
        let pd = grid.patch_dim();
        for r in 0..grid.num_patches() {
            let row = &normed.patches.data()[r * pd..(r + 1) * pd];
            let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / pd as f64;
            let var: f64 = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / pd as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-2);
        }
    }

    #[test]
    fn masked_encoding_is_faster_than_full_encoding() {
        // Coarse performance property: 0.75 masking must beat full
        // visibility on the same image (median of 5 runs each).
        let cfg = ViTConfig {
            input_size: 64,
            patch_size: 8,
            channels: 3,
            encoder_dim: 128,
            encoder_depth: 4,
            encoder_heads: 4,
            decoder_dim: 64,
            decoder_depth: 1,
            decoder_heads: 4,
            mlp_ratio: 4.0,
            mask_ratio: 0.75,
            use_cls_token: true,
            loss_on_all_patches: false,
            normalize_patch_targets: false,
        };
        let model = MaeModel::new(cfg.clone(), 121).unwrap();
        let img = random_image(122, cfg.input_size);
        let grid = patchify(&img, cfg.patch_size).unwrap();
        let masked = random_mask(grid.num_patches(), 0.75, 123).unwrap();
        let full = MaskPlan::full_visibility(grid.num_patches());
        let median_time = |plan: &MaskPlan| -> std::time::Duration {
            let mut times: Vec<std::time::Duration> = (0..5)
                .map(|_| {
                    let start = std::time::Instant::now();
                    model.encode_visible(&grid, plan).unwrap();
                    start.elapsed()
                })
                .collect();
            times.sort();
            times[2]
        };
        // Warm up allocators before timing.
        model.encode_visible(&grid, &masked).unwrap();
        let t_masked = median_time(&masked);
        let t_full = median_time(&full);
        assert!(
            t_masked < t_full,
            "masked {t_masked:?} not faster than full {t_full:?}"
        );
    }
}
