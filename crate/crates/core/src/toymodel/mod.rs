//! A small denoising transformer used as the surgery target, its synthetic
//! data, training, student assembly and fidelity metrics.

mod data;
mod fidelity;
mod model;
mod surgery;
mod train;

pub use data::{
    generate_synthetic, noise_sample, recover_noise, render_clip, seeded_clip, ModelDims, NoiseSchedule,
    SyntheticSample, ALPHA_BAR_END, FRAMES,
};
pub use fidelity::{evaluate_fidelity, FidelityReport, SeedFidelity};
pub use model::{ModelCache, ToyModel, FIXTURE_QK_GAIN};
pub use surgery::assemble_student;
pub use train::{
    denoising_loss, finetune_student, teacher_labelled, train_teacher, trained_fixture_teacher, TEACHER_SAMPLES, TrainConfig, TrainOutcome, DIVERGENCE_LIMIT};
