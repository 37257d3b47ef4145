//! 8-bit binary PGM chips.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};

use crate::error::{Error, Result};

/// Encodes a row-major 8-bit image as binary PGM.
pub fn encode(pixels: &[u8], width: usize, height: usize) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::dim(format!(
            "{} pixels for a {width}x{height} image",
            pixels.len()
        )));
    }
    let mut out = Vec::with_capacity(pixels.len() + 16);
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(pixels, width as u32, height as u32, ExtendedColorType::L8)
        .map_err(|e| Error::Data(format!("PGM encoding failed: {e}")))?;
    Ok(out)
}

/// Decodes an 8-bit grayscale PGM into `(pixels, width, height)`.
pub fn decode(bytes: &[u8]) -> Result<(Vec<u8>, usize, usize)> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Pnm)
        .map_err(|e| Error::Data(format!("invalid PGM: {e}")))?;
    let image::DynamicImage::ImageLuma8(gray) = img else {
        return Err(Error::Data("expected an 8-bit grayscale PGM".into()));
    };
    let (w, h) = gray.dimensions();
    Ok((gray.into_raw(), w as usize, h as usize))
}

pub fn write(path: &Path, pixels: &[u8], width: usize, height: usize) -> Result<()> {
    let bytes = encode(pixels, width, height)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}
