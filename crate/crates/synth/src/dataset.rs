//! On-disk dataset layout: `images/<id>.png`, `masks/<id>.png`,
//! `labels.json` (sample id to individual label) and, for generated data,
//! `synth_config.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use finpipe_core::BinaryMask;

use crate::error::{Result, SynthError};
use crate::generate::{sample_shapes, Dataset, Sample, SynthConfig};

pub const LABELS_FILE: &str = "labels.json";
pub const CONFIG_FILE: &str = "synth_config.json";

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io { path: path.to_path_buf(), source }
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    fs::create_dir_all(&images).map_err(io(&images))?;
    fs::create_dir_all(&masks).map_err(io(&masks))?;
    let mut labels = BTreeMap::new();
    for s in &dataset.samples {
        s.image.save(images.join(format!("{}.png", s.id)))?;
        s.mask.write_png(&masks.join(format!("{}.png", s.id)))?;
        labels.insert(s.id.clone(), s.label.clone());
    }
    let lp = dir.join(LABELS_FILE);
    fs::write(&lp, serde_json::to_vec_pretty(&labels)?).map_err(io(&lp))?;
    if let Some(cfg) = &dataset.config {
        let cp = dir.join(CONFIG_FILE);
        fs::write(&cp, serde_json::to_vec_pretty(cfg)?).map_err(io(&cp))?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let lp = dir.join(LABELS_FILE);
    let labels: BTreeMap<String, String> = serde_json::from_slice(&fs::read(&lp).map_err(io(&lp))?)?;
    if labels.is_empty() {
        return Err(SynthError::Data(format!("{} lists no samples", lp.display())));
    }
    let cp = dir.join(CONFIG_FILE);
    let config: Option<SynthConfig> = if cp.exists() {
        Some(serde_json::from_slice(&fs::read(&cp).map_err(io(&cp))?)?)
    } else {
        None
    };
    let mut samples = Vec::with_capacity(labels.len());
    for (id, label) in labels {
        let ip = dir.join("images").join(format!("{id}.png"));
        let image = image::open(&ip)
            .map_err(|e| SynthError::Data(format!("{}: {e}", ip.display())))?
            .to_rgb8();
        let mask = BinaryMask::read_png(&dir.join("masks").join(format!("{id}.png")))?;
        if mask.dims() != (image.width() as usize, image.height() as usize) {
            return Err(SynthError::Data(format!("mask of {id} does not match its image size")));
        }
        samples.push(Sample { id, label, image, mask });
    }
    let shapes = config.as_ref().map(sample_shapes).unwrap_or_default();
    Ok(Dataset { config, shapes, samples })
}
