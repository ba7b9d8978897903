//! Tiny writers for the on-disk image formats used by dataset dumps and map
//! exports: binary PGM (P5), RGB PNG, and plain CSV grids.

use std::io::Write;
use std::path::Path;

/// Binary 8-bit PGM, one byte per pixel, row-major.
pub fn write_pgm(path: &Path, width: usize, height: usize, bytes: &[u8]) -> std::io::Result<()> {
    assert_eq!(bytes.len(), width * height, "pgm size mismatch");
    let mut out = Vec::with_capacity(bytes.len() + 32);
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.extend_from_slice(bytes);
    std::fs::write(path, out)
}

/// RGB PNG from planar `[3, H, W]` floats in `[0, 1]`.
pub fn write_png_rgb(path: &Path, width: usize, height: usize, planes: &[f64]) -> std::io::Result<()> {
    assert_eq!(planes.len(), 3 * width * height, "png size mismatch");
    let plane = width * height;
    let mut pixels = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            pixels.push((planes[c * plane + p] * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    let img = image::RgbImage::from_raw(width as u32, height as u32, pixels)
        .expect("buffer sized above");
    img.save(path).map_err(|e| std::io::Error::other(e.to_string()))
}

/// CSV of a `height x width` float grid, shortest round-trip formatting.
pub fn write_float_grid_csv(
    path: &Path,
    width: usize,
    height: usize,
    values: &[f64],
) -> std::io::Result<()> {
    assert_eq!(values.len(), width * height, "csv size mismatch");
    let mut out = String::new();
    for row in values.chunks(width) {
        let mut first = true;
        for v in row {
            if !first {
                out.push(',');
            }
            out.push_str(&format!("{v}"));
            first = false;
        }
        out.push('\n');
    }
    std::fs::write(path, out)
}
