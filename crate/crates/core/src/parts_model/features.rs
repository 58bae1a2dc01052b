use std::path::Path;

use super::{FeatureMap, ModelError};

/// Mean brightness per `cell x cell` block, scaled to `[0, 1]`, as a
/// one-dimensional feature map. Partial cells at the right and bottom
/// borders are dropped.
pub fn cell_features(pixels: &[u8], width: u32, height: u32, cell: u32) -> Result<FeatureMap, ModelError> {
    let (w, h, c) = (width as usize, height as usize, cell as usize);
    if pixels.len() != w * h {
        return Err(ModelError::Shape {
            what: "image",
            expected: w * h,
            actual: pixels.len(),
        });
    }
    if c == 0 {
        return Err(ModelError::Format("cell size must be positive".into()));
    }
    let (cw, ch) = (w / c, h / c);
    let norm = 1.0 / (255.0 * (c * c) as f64);
    let mut data = Vec::with_capacity(cw * ch);
    for cy in 0..ch {
        for cx in 0..cw {
            let mut sum: u64 = 0;
            for y in cy * c..(cy + 1) * c {
                let row = &pixels[y * w + cx * c..y * w + (cx + 1) * c];
                sum += row.iter().map(|p| u64::from(*p)).sum::<u64>();
            }
            data.push(sum as f64 * norm);
        }
    }
    FeatureMap::new(cw, ch, 1, data)
}

pub fn cell_features_from_image(path: &Path, cell: u32) -> Result<FeatureMap, ModelError> {
    let img = image::open(path)
        .map_err(|e| ModelError::Format(format!("{}: {e}", path.display())))?
        .into_luma8();
    let (w, h) = img.dimensions();
    cell_features(img.as_raw(), w, h, cell)
}
