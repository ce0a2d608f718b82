//! Image directories with a `file,C_D,C_L` labels table.

use std::path::Path;

use image::GrayImage;
use serde::{Deserialize, Serialize};

use super::GeometryImage;
use crate::error::{Error, Result};

pub const LABELS_FILE: &str = "labels.csv";

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    file: String,
    #[serde(rename = "C_D")]
    c_d: f64,
    #[serde(rename = "C_L")]
    c_l: f64,
}

/// Grayscale PNG or PGM scaled to [0, 1] by `I / 255`.
pub fn load_image(path: &Path) -> Result<GeometryImage> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let pixels = img.into_raw().into_iter().map(|p| p as f64 / 255.0).collect();
    GeometryImage::new(h as usize, w as usize, pixels, None)
}

pub fn save_image(img: &GeometryImage, path: &Path) -> Result<()> {
    let bytes = img.pixels.iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let gray = GrayImage::from_raw(img.width as u32, img.height as u32, bytes)
        .ok_or_else(|| Error::invalid("pixel buffer does not match image size"))?;
    gray.save(path)?;
    Ok(())
}

/// Writes `shape_NNN.png` files plus the labels table.
pub fn write_corpus(dir: &Path, images: &[GeometryImage]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join(LABELS_FILE))?;
    for (i, img) in images.iter().enumerate() {
        let file = format!("shape_{i:03}.png");
        save_image(img, &dir.join(&file))?;
        let [c_d, c_l] = img.label.ok_or_else(|| Error::invalid(format!("image {i} has no label")))?;
        w.serialize(LabelRow { file, c_d, c_l })?;
    }
    w.flush()?;
    Ok(())
}

/// Loads every image listed in the labels table, in table order. All
/// images must share one size.
pub fn read_corpus(dir: &Path) -> Result<Vec<(String, GeometryImage)>> {
    let mut r = csv::Reader::from_path(dir.join(LABELS_FILE))?;
    let mut out: Vec<(String, GeometryImage)> = Vec::new();
    for row in r.deserialize() {
        let row: LabelRow = row?;
        let mut img = load_image(&dir.join(&row.file))?;
        if let Some((_, first)) = out.first() {
            if (first.height, first.width) != (img.height, img.width) {
                return Err(Error::ShapeMismatch {
                    op: "read_corpus",
                    left: vec![first.height, first.width],
                    right: vec![img.height, img.width],
                });
            }
        }
        img.label = Some([row.c_d, row.c_l]);
        out.push((row.file, img));
    }
    if out.is_empty() {
        return Err(Error::invalid(format!("no images listed in {}", dir.join(LABELS_FILE).display())));
    }
    Ok(out)
}
