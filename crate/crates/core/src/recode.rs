//! Renders the first table component of every channel as an 8-bit image.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::LabeledImageSet;
use crate::error::Result;
use crate::lookup::{LookupTables, CHANNELS};

/// Binary PPM (P6) bytes from a channel-planar RGB image.
pub fn ppm_bytes(planar: &[u8], height: usize, width: usize) -> Vec<u8> {
    let plane = height * width;
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(plane * CHANNELS);
    for p in 0..plane {
        for c in 0..CHANNELS {
            out.push(planar[c * plane + p]);
        }
    }
    out
}

/// Recoded images, channel-planar. Each channel is mapped linearly from its
/// min..max over the whole set onto 0..255; a constant channel maps to 0.
pub fn recode_images(tables: &LookupTables, set: &LabeledImageSet) -> Vec<Vec<u8>> {
    let plane = set.height() * set.width();
    let dim = tables.kind().dim();
    let idx: Vec<usize> = (0..set.len()).collect();
    let (batch, _) = set.batch(&idx);
    let values = tables.lookup(&batch).values;
    let per_image = CHANNELS * dim * plane;
    // component 0 of channel c sits at output plane c * dim
    let first = |i: usize, c: usize| {
        let start = i * per_image + c * dim * plane;
        &values.data()[start..start + plane]
    };
    let mut lo = [f64::INFINITY; CHANNELS];
    let mut hi = [f64::NEG_INFINITY; CHANNELS];
    for i in 0..set.len() {
        for c in 0..CHANNELS {
            for &v in first(i, c) {
                lo[c] = lo[c].min(v);
                hi[c] = hi[c].max(v);
            }
        }
    }
    (0..set.len())
        .map(|i| {
            let mut img = Vec::with_capacity(CHANNELS * plane);
            for c in 0..CHANNELS {
                let span = hi[c] - lo[c];
                img.extend(first(i, c).iter().map(|&v| {
                    if span > 0.0 {
                        ((v - lo[c]) / span * 255.0).round().clamp(0.0, 255.0) as u8
                    } else {
                        0
                    }
                }));
            }
            img
        })
        .collect()
}

/// Writes `original_NNNN.ppm` and `recoded_NNNN.ppm` for every image.
pub fn write_recoded(tables: &LookupTables, set: &LabeledImageSet, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let (h, w) = (set.height(), set.width());
    let mut written = Vec::new();
    for (i, img) in recode_images(tables, set).iter().enumerate() {
        let orig = dir.join(format!("original_{i:04}.ppm"));
        fs::write(&orig, ppm_bytes(set.image(i), h, w))?;
        let rec = dir.join(format!("recoded_{i:04}.ppm"));
        fs::write(&rec, ppm_bytes(img, h, w))?;
        written.extend([orig, rec]);
    }
    Ok(written)
}
