pub mod autograd;
pub mod conditioning;
pub mod curation;
pub mod nn;
pub mod schedule;
pub mod synthworld;
pub mod tensor;
pub mod unet;
pub mod trainer;
