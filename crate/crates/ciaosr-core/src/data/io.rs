//! Image file I/O: 8-bit RGB PNG and binary PPM (P6), with values scaled
//! to [0,1] on load and clamped + rounded half-to-even on save.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        decode_png(path, &bytes)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(path, &bytes)
    } else {
        Err(Error::image(path, "unsupported format (expected 8-bit RGB PNG or binary PPM P6)"))
    }
}

fn planes_from_rgb8(data: &[u8], h: usize, w: usize) -> Tensor<f32> {
    let mut out = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out[(c * h + y) * w + x] = data[(y * w + x) * 3 + c] as f32 / 255.0;
            }
        }
    }
    Tensor::new(vec![3, h, w], out)
}

fn decode_png(path: &Path, bytes: &[u8]) -> Result<Tensor<f32>> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::image(path, e.to_string()))?;
    match img {
        image::DynamicImage::ImageRgb8(rgb) => {
            let (w, h) = rgb.dimensions();
            Ok(planes_from_rgb8(rgb.as_raw(), h as usize, w as usize))
        }
        other => Err(Error::image(
            path,
            format!("expected 8-bit RGB pixels, found {:?}", other.color()),
        )),
    }
}

fn decode_ppm(path: &Path, bytes: &[u8]) -> Result<Tensor<f32>> {
    let bad = |reason: &str| Error::image(path, reason);
    let mut pos = 2; // past "P6"
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // skip whitespace and '#' comment lines
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(bad("malformed header field"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are utf-8");
        *field = text.parse().map_err(|_| bad("header field out of range"))?;
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    if w == 0 || h == 0 {
        return Err(bad("zero image dimension"));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(bad("missing raster separator")),
    }
    let need = 3 * w * h;
    let raster = bytes.get(pos..pos + need).ok_or_else(|| bad("truncated raster"))?;
    Ok(planes_from_rgb8(raster, h, w))
}

/// Clamp to [0,1] and quantize to 8 bits, rounding halves to even.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

fn to_interleaved_rgb8(img: &Tensor<f32>) -> (usize, usize, Vec<u8>) {
    let shape = img.shape();
    assert_eq!(shape.len(), 3, "save_image expects [3×H×W]");
    assert_eq!(shape[0], 3, "save_image expects 3 channels");
    let (h, w) = (shape[1], shape[2]);
    let mut data = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data.push(quantize(img.at3(c, y, x)));
            }
        }
    }
    (h, w, data)
}

pub fn save_image(img: &Tensor<f32>, path: &Path) -> Result<()> {
    let (h, w, data) = to_interleaved_rgb8(img);
    let is_ppm = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("ppm"))
        .unwrap_or(false);
    if is_ppm {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let header = format!("P6\n{w} {h}\n255\n");
        f.write_all(header.as_bytes())
            .and_then(|_| f.write_all(&data))
            .map_err(|e| Error::io(path, e))
    } else {
        let buf = image::RgbImage::from_raw(w as u32, h as u32, data)
            .expect("raster length matches dimensions");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::image(path, e.to_string()))
    }
}

/// All PNG/PPM files directly inside `dir`, sorted lexicographically by
/// file name for deterministic dataset ordering.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let supported = path
            .extension()
            .map(|e| e.eq_ignore_ascii_case("png") || e.eq_ignore_ascii_case("ppm"))
            .unwrap_or(false);
        if supported && path.is_file() {
            files.push(path);
        }
    }
    files.sort_by_key(|p| p.file_name().map(|n| n.to_os_string()));
    if files.is_empty() {
        return Err(Error::EmptyDataset(dir.to_path_buf()));
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A 4×4 checkerboard of (10,20,30) and (200,150,100), encoded to PNG
    /// by an independent encoder (Python zlib/struct), byte for byte.
    const GOLDEN_PNG: [u8; 81] = [
        0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a, 0x00, 0x00, 0x00, 0x0d, 0x49, 0x48,
        0x44, 0x52, 0x00, 0x00, 0x00, 0x04, 0x00, 0x00, 0x00, 0x04, 0x08, 0x02, 0x00, 0x00,
        0x00, 0x26, 0x93, 0x09, 0x29, 0x00, 0x00, 0x00, 0x18, 0x49, 0x44, 0x41, 0x54, 0x78,
        0xda, 0x63, 0xe0, 0x12, 0x91, 0x3b, 0x31, 0x2d, 0x05, 0x42, 0x32, 0xc0, 0x59, 0x40,
        0x92, 0x01, 0xa7, 0x0c, 0x00, 0xa1, 0x23, 0x0f, 0xf1, 0x98, 0x20, 0xc7, 0x0b, 0x00,
        0x00, 0x00, 0x00, 0x49, 0x45, 0x4e, 0x44, 0xae, 0x42, 0x60, 0x82,
    ];

    fn checkerboard() -> Tensor<f32> {
        let (a, b) = ([10u8, 20, 30], [200u8, 150, 100]);
        let mut data = vec![0.0f32; 3 * 16];
        for y in 0..4 {
            for x in 0..4 {
                let px = if (x + y) % 2 == 0 { a } else { b };
                for c in 0..3 {
                    data[(c * 4 + y) * 4 + x] = px[c] as f32 / 255.0;
                }
            }
        }
        Tensor::new(vec![3, 4, 4], data)
    }

    #[test]
    fn golden_png_decodes_to_exact_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("golden.png");
        fs::write(&path, GOLDEN_PNG).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.data(), checkerboard().data());
    }

    #[test]
    fn png_save_load_round_trips_exact_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("board.png");
        let img = checkerboard();
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn ppm_save_load_round_trips_exact_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("board.ppm");
        let img = checkerboard();
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn one_white_pixel_ppm_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("white.ppm");
        fs::write(&path, b"P6 1 1 255\n\xff\xff\xff").unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.shape(), &[3, 1, 1]);
        assert_eq!(img.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn ppm_with_comments_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ppm");
        fs::write(&path, b"P6\n# made by hand\n2 1\n# maxval next\n255\n\x01\x02\x03\x04\x05\x06")
            .unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.shape(), &[3, 1, 2]);
        assert!((img.at3(0, 0, 1) - 4.0 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn quantization_clamps_and_rounds_half_to_even() {
        assert_eq!(quantize(-0.3), 0);
        assert_eq!(quantize(1.7), 255);
        assert_eq!(quantize(0.5), 128); // 127.5 → even
        assert_eq!(quantize(100.0 / 255.0), 100);
    }

    #[test]
    fn truncated_and_alien_files_error_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let trunc = dir.path().join("short.ppm");
        fs::write(&trunc, b"P6 4 4 255\n\x00\x01").unwrap();
        assert!(matches!(load_image(&trunc), Err(Error::Image { .. })));

        let alien = dir.path().join("alien.bin");
        fs::write(&alien, b"GIF89a....").unwrap();
        assert!(matches!(load_image(&alien), Err(Error::Image { .. })));
    }

    #[test]
    fn non_rgb_png_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.png");
        let gray = image::GrayImage::from_raw(2, 2, vec![0, 80, 160, 240]).unwrap();
        gray.save_with_format(&path, image::ImageFormat::Png).unwrap();
        assert!(matches!(load_image(&path), Err(Error::Image { .. })));
    }

    #[test]
    fn dataset_listing_is_sorted_and_rejects_empty_dirs() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(list_images(dir.path()), Err(Error::EmptyDataset(_))));
        let img = checkerboard();
        for name in ["b.png", "a.ppm", "c.png", "notes.txt"] {
            if name.ends_with(".txt") {
                fs::write(dir.path().join(name), b"ignored").unwrap();
            } else {
                save_image(&img, &dir.path().join(name)).unwrap();
            }
        }
        let files = list_images(dir.path()).unwrap();
        let names: Vec<_> =
            files.iter().map(|p| p.file_name().unwrap().to_str().unwrap()).collect();
        assert_eq!(names, ["a.ppm", "b.png", "c.png"]);
    }
}
