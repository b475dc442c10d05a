use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gradcore::Tensor;

/// Interleaved 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Clamps to `[0, 1]` and rounds half away from zero onto `0..=255`.
pub fn quantize(x: f64) -> u8 {
    let x = if x.is_nan() { 0.0 } else { x.clamp(0.0, 1.0) };
    (x * 255.0).round() as u8
}

/// `[3, H, W]` channel-major tensor to an RGB raster.
pub fn to_rgb(image: &Tensor) -> Result<RgbImage> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::invalid(format!(
            "expected a [3, H, W] image, got {s:?}"
        )));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let d = image.data();
    let mut pixels = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            pixels.push(quantize(d[c * plane + p]));
        }
    }
    Ok(RgbImage {
        width: w,
        height: h,
        pixels,
    })
}

/// Lays equally sized images out row-major, `cols` per row, separated by
/// black gutters of `gutter` pixels.
pub fn tile_sheet(images: &[Tensor], cols: usize, gutter: usize) -> Result<RgbImage> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("tile sheet needs at least one image"))?;
    if cols == 0 {
        return Err(Error::invalid("tile sheet needs at least one column"));
    }
    let tile = to_rgb(first)?;
    let (tw, th) = (tile.width, tile.height);
    let rows = images.len().div_ceil(cols);
    let width = cols * tw + (cols - 1) * gutter;
    let height = rows * th + (rows - 1) * gutter;
    let mut pixels = vec![0u8; width * height * 3];
    for (k, img) in images.iter().enumerate() {
        let t = to_rgb(img)?;
        if t.width != tw || t.height != th {
            return Err(Error::invalid("tile sheet images differ in size"));
        }
        let (r, c) = (k / cols, k % cols);
        let (x0, y0) = (c * (tw + gutter), r * (th + gutter));
        for y in 0..th {
            let dst = ((y0 + y) * width + x0) * 3;
            pixels[dst..dst + tw * 3].copy_from_slice(&t.pixels[y * tw * 3..(y + 1) * tw * 3]);
        }
    }
    Ok(RgbImage {
        width,
        height,
        pixels,
    })
}

pub fn write_png(img: &RgbImage, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e.to_string()));
    let mut w = enc.write_header().map_err(to_io)?;
    w.write_image_data(&img.pixels).map_err(to_io)?;
    w.finish().map_err(to_io)
}

pub fn read_png(path: &Path) -> Result<RgbImage> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |e: png::DecodingError| Error::format("PNG", format!("{}: {e}", path.display()));
    let mut reader = png::Decoder::new(std::io::BufReader::new(file))
        .read_info()
        .map_err(bad)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format("PNG", "expected 8-bit RGB"));
    }
    buf.truncate(info.buffer_size());
    Ok(RgbImage {
        width: info.width as usize,
        height: info.height as usize,
        pixels: buf,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_rounds_half_away() {
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(-3.0), 0);
        assert_eq!(quantize(7.0), 255);
        assert_eq!(quantize(f64::NAN), 0);
    }

    #[test]
    fn sheet_geometry() {
        let tiles = vec![Tensor::full(&[3, 32, 32], 1.0); 225];
        let sheet = tile_sheet(&tiles, 15, 2).unwrap();
        assert_eq!((sheet.width, sheet.height), (508, 508));
        // Gutter pixel right of the first tile is black, tile pixel is white.
        assert_eq!(sheet.pixels[32 * 3], 0);
        assert_eq!(sheet.pixels[31 * 3], 255);
    }

    #[test]
    fn png_round_trip_keeps_quantized_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..3 * 4 * 5).map(|i| (i as f64 * 0.37).fract()).collect();
        let img = to_rgb(&Tensor::new(vec![3, 4, 5], data).unwrap()).unwrap();
        let p = dir.path().join("x.png");
        write_png(&img, &p).unwrap();
        assert_eq!(read_png(&p).unwrap(), img);
        assert!(write_png(&img, &dir.path().join("no/such/dir.png")).is_err());
    }
}
