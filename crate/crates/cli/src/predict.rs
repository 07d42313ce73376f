//! Mask prediction: runs a checkpoint over image files and writes paletted
//! PNG masks, optionally with per-class probability maps.

use std::path::{Path, PathBuf};

use ugnn_core::data;
use ugnn_core::metrics::argmax_channels;
use ugnn_core::{Error, Result, Tensor};

use crate::checkpoint;
use crate::palette::class_palette;

pub struct PredictOutcome {
    pub written: Vec<PathBuf>,
    /// Unreadable or incompatible inputs; the batch continues past them.
    pub failures: Vec<(PathBuf, Error)>,
}

pub fn cmd_predict(
    checkpoint_path: &Path,
    images: &[PathBuf],
    out_dir: &Path,
    write_probs: bool,
) -> Result<PredictOutcome> {
    let ckpt = checkpoint::load_checkpoint(checkpoint_path)?;
    let model = ckpt.build_model()?;
    let size = ckpt.config.image_size;
    let num_classes = model.config().num_classes;
    let palette = class_palette(num_classes);
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut written = Vec::new();
    let mut failures = Vec::new();
    for path in images {
        match predict_one(&model, path, size, write_probs, out_dir, &palette) {
            Ok(mut paths) => written.append(&mut paths),
            Err(e) => failures.push((path.clone(), e)),
        }
    }
    Ok(PredictOutcome { written, failures })
}

fn predict_one(
    model: &ugnn_core::model::Model,
    path: &Path,
    size: usize,
    write_probs: bool,
    out_dir: &Path,
    palette: &[[u8; 3]],
) -> Result<Vec<PathBuf>> {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| Error::Data(format!("{} has no file name", path.display())))?;
    let image = data::load_image(path)?;
    if image.shape()[0] != model.config().in_channels {
        return Err(Error::Data(format!(
            "{}: {} channels, model wants {}",
            path.display(),
            image.shape()[0],
            model.config().in_channels
        )));
    }
    let image = data::resize_bilinear(&image, size, size);
    let probs = model.segment(&image)?;
    let labels = argmax_channels(&probs);

    let mut out_paths = Vec::new();
    let mask_path = out_dir.join(format!("{stem}_mask.png"));
    data::save_mask_png(&mask_path, &labels, size, size, palette)?;
    out_paths.push(mask_path);

    if write_probs {
        let hw = size * size;
        for c in 0..model.config().num_classes {
            let plane: Vec<_> = probs.data()[c * hw..(c + 1) * hw].to_vec();
            let map = Tensor::new(&[1, size, size], plane)?;
            let p = out_dir.join(format!("{stem}_prob{c}.png"));
            data::save_image_png(&p, &map)?;
            out_paths.push(p);
        }
    }
    Ok(out_paths)
}
