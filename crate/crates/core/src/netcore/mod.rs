//! Tiny encoder/decoder/head networks with reverse-mode gradients,
//! Adam optimization, EMA-based momentum/teacher updates, and exact-resume
//! checkpointing.

pub mod adam;
pub mod checkpoint;
pub mod ema;
pub mod model;
pub mod tape;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{load_checkpoint, rng_from_arrays, rng_to_arrays, save_checkpoint, Checkpoint};
pub use ema::ema_update;
pub use model::{
    bind_params, cell_src_coords, collect_grads, decoder_forward, decoder_graph, encoder_forward,
    encoder_graph, grid_to_rows, head_forward, head_graph, init_decoder, init_dfpm, init_encoder,
    init_heads, init_pretrain_state, init_segmenter_state, rows_to_grid, BoundParams, Embedding,
    EncoderNodes, FeatureMap, HeadKind, Logits, ModelState, NetConfig, Tensor,
};
pub use tape::{cosine_value, Gradients, NodeId, Tape};
