use std::fs;
use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};

use super::Mask;
use crate::error::{Error, Result};
use crate::metrics::ImageU8;

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image { path: path.to_path_buf(), source }
}

fn format_for(path: &Path) -> Result<ImageFormat> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => Ok(ImageFormat::Png),
        Some("ppm") | Some("pgm") | Some("pnm") => Ok(ImageFormat::Pnm),
        _ => Err(Error::Data(format!("{}: only .png and .ppm/.pgm images are supported", path.display()))),
    }
}

/// Reads any supported image as 8-bit RGB.
pub fn read_image(path: &Path) -> Result<ImageU8> {
    let format = format_for(path)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, format).map_err(|e| image_err(path, e))?.into_rgb8();
    ImageU8::new(img.width() as usize, img.height() as usize, img.into_raw())
}

/// Reads a mask; any non-zero luma counts as set.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let format = format_for(path)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, format).map_err(|e| image_err(path, e))?.into_luma8();
    let (width, height) = (img.width() as usize, img.height() as usize);
    Ok(Mask { width, height, data: img.into_raw().into_iter().map(|v| v > 0).collect() })
}

/// Writes next to `path` and renames into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn encode(path: &Path, write: impl FnOnce(&mut std::io::Cursor<Vec<u8>>, ImageFormat) -> image::ImageResult<()>) -> Result<()> {
    let format = format_for(path)?;
    let mut buf = std::io::Cursor::new(Vec::new());
    write(&mut buf, format).map_err(|e| image_err(path, e))?;
    write_atomic(path, buf.get_ref())
}

pub fn write_image(path: &Path, img: &ImageU8) -> Result<()> {
    let rgb = RgbImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
        .ok_or_else(|| Error::InvalidArgument("image buffer does not match its size".into()))?;
    encode(path, |buf, f| rgb.write_to(buf, f))
}

/// Writes a mask as 0/255 grayscale.
pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let data = mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    let gray = GrayImage::from_raw(mask.width as u32, mask.height as u32, data)
        .ok_or_else(|| Error::InvalidArgument("mask buffer does not match its size".into()))?;
    encode(path, |buf, f| gray.write_to(buf, f))
}
