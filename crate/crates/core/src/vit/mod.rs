//! Vision-transformer masked autoencoder: patch geometry, masking, fixed
//! positional tables, and the encoder/decoder model.

pub mod mask;
pub mod model;
pub mod patches;
pub mod pos;

pub use mask::{masked_count, random_mask, MaskPlan};
pub use model::{
    export_attention_maps, mae_loss, normalized_patch_targets, AttentionMaps, MaeModel, MaeVars,
    ViTConfig,
};
pub use patches::{patchify, unpatchify, PatchGrid};
pub use pos::sincos_pos_embed;
