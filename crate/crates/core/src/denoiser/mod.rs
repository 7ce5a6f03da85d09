//! The learned noise predictor and its training loop.

mod checkpoint;
pub mod graph;
mod tensor;
mod train;
mod unet;

pub use checkpoint::Checkpoint;
pub use tensor::Tensor;
pub use train::{sample_training_patches, stack_patches, train_step, AdamState, TrainConfig, MAX_REJECTIONS};
pub use unet::{timestep_embedding, Denoiser, DenoiserConfig, ParamStore, NORM_GROUPS};

/// Largest number of pixels evaluated in one batch during inference.
pub const INFERENCE_CHUNK_PIXELS: usize = 16_384;

impl Denoiser {
    /// Noise predictions for many patches at one timestep, evaluated in
    /// bounded-size chunks. Each entry of `patches` is a row-major `ps x ps` tile.
    pub fn predict(&self, patches: &[Vec<f64>], t: usize) -> crate::Result<Vec<Vec<f64>>> {
        let ps = self.config().patch_size;
        let chunk = (INFERENCE_CHUNK_PIXELS / (ps * ps)).max(1);
        let mut out = Vec::with_capacity(patches.len());
        for group in patches.chunks(chunk) {
            let mut data = Vec::with_capacity(group.len() * ps * ps);
            for p in group {
                if p.len() != ps * ps {
                    return Err(crate::Error::InvalidArgument(format!(
                        "patch has {} values, denoiser expects {}",
                        p.len(),
                        ps * ps
                    )));
                }
                data.extend_from_slice(p);
            }
            let y = self.forward(&Tensor::from_vec([group.len(), 1, ps, ps], data), &vec![t; group.len()])?;
            out.extend((0..group.len()).map(|i| y.item(i).to_vec()));
        }
        Ok(out)
    }
}
