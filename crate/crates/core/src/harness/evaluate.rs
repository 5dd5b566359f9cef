use std::path::Path;

use crate::datagen::load_manifest;
use crate::error::{Error, Result};
use crate::metrics::{metrics_report, MetricsReport, ThresholdRule};
use crate::model::{load_checkpoint, LivenessModel};
use crate::parallel::Exec;
use crate::LabeledImage;

use super::train::{score_images, scored};

fn check_compatible(model: &LivenessModel, images: &[LabeledImage], source: &Path) -> Result<()> {
    let (h, w) = model.config().input_size;
    for (row, img) in images.iter().enumerate() {
        match *img.image.shape() {
            [ih, iw, 3] if ih >= h && iw >= w => {}
            ref s => {
                return Err(Error::Checkpoint(format!(
                    "model expects at least {h}x{w}x3 inputs but {} row {} is {s:?}",
                    source.display(),
                    row + 1
                )))
            }
        }
    }
    Ok(())
}

/// Scores every image of `manifest` with the checkpointed model and
/// reports the metrics. `dev_manifest` supplies the threshold under
/// [`ThresholdRule::DevEer`].
pub fn evaluate(
    checkpoint: &Path,
    manifest: &Path,
    rule: ThresholdRule,
    dev_manifest: Option<&Path>,
    exec: Exec,
) -> Result<MetricsReport> {
    let model = load_checkpoint(checkpoint)?.into_model()?;
    let test = load_manifest(manifest)?.images;
    check_compatible(&model, &test, manifest)?;
    let test_scores = scored(&test, &score_images(&model, &test, exec)?);
    let dev_scores = match dev_manifest {
        Some(path) => {
            let dev = load_manifest(path)?.images;
            check_compatible(&model, &dev, path)?;
            Some(scored(&dev, &score_images(&model, &dev, exec)?))
        }
        None => None,
    };
    metrics_report(&test_scores, dev_scores.as_deref(), rule)
}
