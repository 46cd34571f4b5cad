//! Samples to network inputs.

use bevcar_core::{BevCar, ModelInput};
use bevcar_data::{RgbImage, Sample};
use candle_core::{Device, Tensor};

use crate::error::Result;

/// `[N, 3, H, W]` float tensor in `[0, 1]`.
pub fn images_to_tensor(images: &[RgbImage], device: &Device) -> Result<Tensor> {
    let (h, w) = (images[0].height, images[0].width);
    let mut data = vec![0f32; images.len() * 3 * h * w];
    for (n, img) in images.iter().enumerate() {
        for (p, rgb) in img.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[(n * 3 + c) * h * w + p] = rgb[c] as f32 / 255.0;
            }
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), device)?)
}

/// Model input for a sample; radar subsampling is seeded by the sample.
pub fn model_input(model: &BevCar, sample: &Sample) -> Result<ModelInput> {
    Ok(ModelInput {
        images: images_to_tensor(&sample.images, model.device())?,
        rig: sample.calibration.clone(),
        radar: model.voxelize(&sample.radar, sample.seed)?,
    })
}
