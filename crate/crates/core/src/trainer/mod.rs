//! Adapted multilayer perceptron, SGD and continual-learning schedules.

mod model;
mod run;
mod task;

pub use model::{
    sgd_update, Activation, AdaptedLayer, EffectiveWeight, ForwardCache, Gradients, Method, MethodConfig, Model, Param,
    RankSpec,
};
pub use run::{
    evaluate, pretrained_model, run_continual, run_method, run_method_from, train_task, ContinualReport,
    ContinualSchedule, ModelSpec, TaskReport,
};
pub use task::{Loss, TaskKind, TaskSampler, TaskSpec};

/// Mixes `tags` into `base` with SplitMix64 steps.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut z = base;
    for &t in tags {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(t);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}
