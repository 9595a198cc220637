//! Training, evaluation and long-form separation.

mod css;
mod eval;
mod optim;
mod train;

pub use css::{css_separate, normalized_correlation, stitch_align, CssConfig};
pub use eval::{evaluate, evaluate_outputs, EvalReport, SampleMetrics, Separation, Separator};
pub use optim::{AdamW, AdamWConfig, LrSchedule};
pub use train::{
    load_checkpoint, StepRecord, TrainConfig, TrainData, TrainExample, TrainState, Trainer, CHECKPOINT_FORMAT,
};

/// Decorrelated child seed of `(seed, index)`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Worker count from `SRCORRNET_THREADS`, defaulting to one.
pub fn thread_limit() -> usize {
    std::env::var("SRCORRNET_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}
