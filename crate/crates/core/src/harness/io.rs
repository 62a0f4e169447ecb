//! PNG/PPM images and ROI maps.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, ImageFormat, Luma, Rgb};

use crate::error::{Error, Result};
use crate::objectives::RoiMap;
use crate::tensor::Tensor;

fn format_of(path: &Path) -> Result<ImageFormat> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => Ok(ImageFormat::Png),
        Some("ppm" | "pgm" | "pnm") => Ok(ImageFormat::Pnm),
        _ => Err(Error::Format(format!("{}: only PNG and PPM images are supported", path.display()))),
    }
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    let fmt = format_of(path)?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory_with_format(&bytes, fmt).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Loads an image as a `[1, 3, H, W]` tensor on the 0-255 scale. Grayscale
/// images are replicated across channels.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p[c] as f64;
        }
    }
    Tensor::from_vec([1, 3, h, w], data)
}

/// Writes the first item of `t` after rounding and clamping to 8 bits.
pub fn save_image(path: &Path, t: &Tensor) -> Result<()> {
    let fmt = format_of(path)?;
    if t.channels() != 3 {
        return Err(Error::Dimension(format!("expected 3 channels, got {}", t.channels())));
    }
    let (h, w) = (t.height(), t.width());
    let img = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Rgb(std::array::from_fn(|c| t.at(0, c, y as usize, x as usize).round().clamp(0.0, 255.0) as u8))
    });
    let mut bytes = std::io::Cursor::new(Vec::new());
    img.write_to(&mut bytes, fmt)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    crate::checkpoint::write_atomic(path, bytes.get_ref())
}

/// A grayscale PNG scaled to `[0, 1]`.
pub fn load_roi_map(path: &Path) -> Result<RoiMap> {
    let img = open(path)?.to_luma8();
    let data = img.pixels().map(|p: &Luma<u8>| p[0] as f64 / 255.0).collect();
    RoiMap::new(img.height() as usize, img.width() as usize, data)
}

pub fn save_roi_map(path: &Path, m: &RoiMap) -> Result<()> {
    let img = ImageBuffer::from_fn(m.width() as u32, m.height() as u32, |x, y| {
        Luma([(m.at(y as usize, x as usize) * 255.0).round() as u8])
    });
    let mut bytes = std::io::Cursor::new(Vec::new());
    img.write_to(&mut bytes, ImageFormat::Png)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    crate::checkpoint::write_atomic(path, bytes.get_ref())
}

/// Every PNG/PPM file directly in `dir`, sorted by file name.
pub fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_file() && format_of(&p).is_ok() {
            out.push(p);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::Config(format!("no PNG or PPM images in {}", dir.display())));
    }
    Ok(out)
}

/// File stem used as the image name in reports.
pub fn image_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn load_dir(dir: &Path) -> Result<Vec<(String, Tensor)>> {
    image_files(dir)?
        .into_iter()
        .map(|p| Ok((image_name(&p), load_image(&p)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_and_ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..3 * 4 * 5).map(|i| (i * 7 % 256) as f64).collect();
        let t = Tensor::from_vec([1, 3, 4, 5], data).unwrap();
        for name in ["a.png", "a.ppm"] {
            let p = dir.path().join(name);
            save_image(&p, &t).unwrap();
            assert_eq!(load_image(&p).unwrap(), t);
        }
        assert!(save_image(&dir.path().join("a.jpg"), &t).is_err());
        assert_eq!(image_files(dir.path()).unwrap().len(), 2);
    }

    #[test]
    fn roi_map_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let m = RoiMap::half_plane(4, 4, 1.0, 0.0).unwrap();
        let p = dir.path().join("m.png");
        save_roi_map(&p, &m).unwrap();
        assert_eq!(load_roi_map(&p).unwrap(), m);
    }
}
