use crate::data::ImageStack;
use crate::model::Model;
use crate::tensor::{Result, Tensor, TensorError};

/// Images per forward pass.
pub const CHUNK: usize = 500;

/// Posterior content means for every image, `[n, layers·z_C]`.
///
/// The model is bound frozen, so nothing here can touch its parameters.
pub fn extract_features(model: &Model, images: &ImageStack) -> Result<Tensor> {
    let cfg = &model.config;
    if (images.h, images.w) != (cfg.image_h, cfg.image_w) {
        return Err(TensorError::Contract(format!(
            "images are {}x{} but the {} model expects {}x{}",
            images.h, images.w, cfg.kind, cfg.image_h, cfg.image_w
        )));
    }
    let width = cfg.layers * cfg.content_dim;
    let mut data = Vec::with_capacity(images.n * width);
    let mut start = 0;
    while start < images.n {
        let end = (start + CHUNK).min(images.n);
        data.extend_from_slice(model.content_means(&images.range(start, end))?.data());
        start = end;
    }
    Tensor::new(vec![images.n, width], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelKind};

    fn tiny(kind: ModelKind) -> Model {
        let cfg = ModelConfig {
            content_dim: 3,
            content_hidden: vec![8],
            pose_hidden: vec![4],
            ..ModelConfig::defaults(kind, 6, 6)
        };
        Model::new(cfg, 1).unwrap()
    }

    #[test]
    fn widths_follow_layers() {
        let imgs = ImageStack::zeros(7, 6, 6);
        assert_eq!(extract_features(&tiny(ModelKind::Stvae), &imgs).unwrap().shape(), &[7, 3]);
        assert_eq!(extract_features(&tiny(ModelKind::Cstvae), &imgs).unwrap().shape(), &[7, 6]);
    }

    #[test]
    fn identical_images_identical_features() {
        let mut imgs = ImageStack::zeros(2, 6, 6);
        for i in 0..2 {
            imgs.image_mut(i)[7] = 1.0;
            imgs.image_mut(i)[20] = 1.0;
        }
        let f = extract_features(&tiny(ModelKind::Cstvae), &imgs).unwrap();
        assert_eq!(f.row(0), f.row(1));
    }

    #[test]
    fn size_mismatch_is_rejected() {
        assert!(extract_features(&tiny(ModelKind::Vae), &ImageStack::zeros(1, 5, 6)).is_err());
    }
}
