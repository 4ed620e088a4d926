use crate::error::{Error, Result};
use crate::model::VitModel;
use crate::tensor::{Graph, Real, RngStream, StreamPurpose, Tensor};

/// Largest absolute difference between the adapted model's CLS embeddings
/// and the frozen backbone's on `batches` random gaussian batches.
pub fn check_baseline_equivalence<F: Real>(
    model: &VitModel<F>,
    batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    if batches == 0 || batch_size == 0 {
        return Err(Error::Config(
            "equivalence check needs at least one nonempty batch".into(),
        ));
    }
    let cfg = &model.cfg;
    let root = RngStream::new(seed);
    let mut worst = 0.0f64;
    for b in 0..batches {
        let mut rng = root.derive(StreamPurpose::Verify, b as u64);
        let images: Vec<Tensor<F>> = (0..batch_size)
            .map(|_| rng.gaussian_tensor(&[cfg.channels, cfg.image_height, cfg.image_width], 1.0))
            .collect();
        let refs: Vec<&Tensor<F>> = images.iter().collect();
        let mut g = Graph::new();
        let adapted = model.forward_cls(&mut g, &refs, false)?;
        let frozen = model.forward_backbone(&mut g, &refs)?;
        worst = worst.max(g.value(adapted.cls).max_abs_diff(g.value(frozen.cls))?);
    }
    Ok(worst)
}
