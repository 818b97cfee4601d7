//! Optimization: AdamW with warmup/cosine scheduling and layer-wise decay,
//! checkpointing, a synthetic dataset, and the pretrain / finetune /
//! from-scratch loops.

pub mod checkpoint;
pub mod data;
pub mod loops;
pub mod optim;

pub use checkpoint::{fingerprint, load_encoder_weights, load_raw, save_state, CheckpointData, LoadReport};
pub use data::{load_image_dir, synthetic_dataset, Sample};
pub use loops::{
    argmax, dump_reconstruction, evaluate, finetune_loop, pretrain_loop, supervised_loop,
    write_trace, LoopOptions, SupervisedTrace,
};
pub use optim::{layerwise_lr_scale, lr_at, OptimConfig, Schedule, TrainState};

use crate::mae::DecoderConfig;
use crate::model::params::ParamMeta;
use crate::model::{Hiera, HieraConfig};
use crate::tensor::Element;

/// Config hash tying checkpoints to the model that produced them.
pub fn config_hash(cfg: &HieraConfig, dec: Option<&DecoderConfig>) -> u64 {
    fingerprint(&format!("{cfg:?}|{dec:?}"))
}

/// Train state over a bare encoder's parameters.
pub fn encoder_state<E: Element>(
    model: &Hiera<E>,
    opt: OptimConfig,
    seed: u64,
) -> TrainState<E> {
    let entries: Vec<(String, crate::tensor::Tensor<E>, ParamMeta)> = model
        .params
        .iter()
        .map(|(n, t, m)| (n.to_string(), t.clone(), m))
        .collect();
    let hash = config_hash(&model.config, None);
    TrainState::new(entries, opt, seed, hash, model.config.total_blocks())
}

/// Train state over encoder plus decoder for pretraining.
pub fn pretrain_state<E: Element>(
    mae: &crate::mae::MaePretrainer<E>,
    opt: OptimConfig,
    seed: u64,
) -> TrainState<E> {
    let entries = mae.param_entries();
    let hash = config_hash(&mae.encoder.config, Some(&mae.decoder.config));
    TrainState::new(
        entries,
        opt,
        seed,
        hash,
        mae.encoder.config.total_blocks(),
    )
}
