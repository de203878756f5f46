//! 8-bit binary PGM (P5, maxval 255) for images and masks; sample values
//! map to pixels as `round(255 * v)`.

use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};

use crate::error::{Error, Result};
use crate::field::Field2D;

pub fn to_bytes(field: &Field2D) -> Result<Vec<u8>> {
    let pixels: Vec<u8> = field.values().iter().map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8).collect();
    let mut out = Vec::with_capacity(pixels.len() + 16);
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&pixels, field.width() as u32, field.height() as u32, ExtendedColorType::L8)
        .map_err(|e| Error::Pgm(e.to_string()))?;
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Field2D> {
    let img = image::load(Cursor::new(bytes), ImageFormat::Pnm).map_err(|e| Error::Pgm(e.to_string()))?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => return Err(Error::Pgm(format!("expected 8-bit grayscale, got {:?}", other.color()))),
    };
    let (w, h) = gray.dimensions();
    let values = gray.into_raw().into_iter().map(|p| p as f64 / 255.0).collect();
    Field2D::new(w as usize, h as usize, values)
}

/// Writes through a temporary file and renames, so readers never observe a
/// partially written image.
pub fn write(path: &Path, field: &Field2D) -> Result<()> {
    crate::io::write_atomic(path, &to_bytes(field)?)
}

pub fn read(path: &Path) -> Result<Field2D> {
    from_bytes(&std::fs::read(path)?)
}
