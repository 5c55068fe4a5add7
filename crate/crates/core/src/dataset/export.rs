//! 8-bit previews. Lossy; never read back for training.

use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{RgbImage, SpectrumMapStack};

/// Clamps to `[0, 1]` and quantizes to 8 bits, row-major RGB.
pub fn to_rgb8(img: &RgbImage) -> Vec<u8> {
    img.data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn write_png(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| Error::Parse(e.to_string()))?;
    w.write_image_data(&to_rgb8(img))
        .map_err(|e| Error::Parse(e.to_string()))?;
    Ok(())
}

/// Binary `P6` PPM.
pub fn write_ppm(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)?;
    w.write_all(&to_rgb8(img))?;
    w.flush()?;
    Ok(())
}

/// One PNG per band, `{prefix}_band{k:02}.png`, under `dir`.
pub fn export_stack_png(dir: impl AsRef<Path>, prefix: &str, stack: &SpectrumMapStack) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for k in 0..stack.bands() {
        write_png(dir.join(format!("{prefix}_band{k:02}.png")), &stack.band(k))?;
    }
    Ok(())
}
