//! Raster decoding, resizing and patch tiling.

use std::io::Cursor;
use std::path::Path;

use image::ImageFormat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PNG_MAGIC: [u8; 8] = [0x89, 0x50, 0x4E, 0x47, 0x0D, 0x0A, 0x1A, 0x0A];
const JPEG_MAGIC: [u8; 2] = [0xFF, 0xD8];

/// Decoded 8-bit RGB raster, row-major, interleaved channels.
#[derive(Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for RgbImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RgbImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::arg(format!("image dimensions must be positive, got {width}x{height}")));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::arg(format!(
                "pixel buffer has {} bytes, expected {}",
                pixels.len(),
                width * height * 3
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        assert!(width > 0 && height > 0);
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, pixels }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        assert!(width > 0 && height > 0);
        let mut pixels = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, pixels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copies the `w`x`h` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<RgbImage> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(Error::arg(format!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut pixels = Vec::with_capacity(w * h * 3);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * 3;
            pixels.extend_from_slice(&self.pixels[start..start + w * 3]);
        }
        Ok(RgbImage { width: w, height: h, pixels })
    }

    /// Channel-planar copy scaled by `scale`, laid out as `[3, height, width]`.
    pub fn to_planar(&self, scale: f64) -> Vec<f64> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; 3 * plane];
        for (p, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = f64::from(px[c]) * scale;
            }
        }
        out
    }
}

/// One `n`x`n` tile of an image, addressed by its position in the patch grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Patch {
    pub grid_row: usize,
    pub grid_col: usize,
    pub linear_index: usize,
    pub image: RgbImage,
}

impl Patch {
    pub fn size(&self) -> usize {
        self.image.width()
    }

    /// Pixel coordinates of the patch's top-left corner in the source image.
    pub fn origin(&self) -> (usize, usize) {
        (self.grid_col * self.size(), self.grid_row * self.size())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMethod {
    Nearest,
    Bilinear,
}

/// Encoded container formats accepted on input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodedFormat {
    Png,
    Jpeg,
}

pub fn sniff_format(bytes: &[u8]) -> Result<EncodedFormat> {
    if bytes.starts_with(&PNG_MAGIC[..4]) {
        Ok(EncodedFormat::Png)
    } else if bytes.starts_with(&JPEG_MAGIC) {
        Ok(EncodedFormat::Jpeg)
    } else if bytes.is_empty() {
        Err(Error::Decode {
            offset: 0,
            message: "empty stream".into(),
        })
    } else {
        Err(Error::UnsupportedFormat(format!(
            "leading bytes {:02X?} match neither PNG nor JPEG",
            &bytes[..bytes.len().min(4)]
        )))
    }
}

/// Decodes a PNG or baseline JPEG stream into an 8-bit RGB raster.
///
/// The container structure is walked first so that truncated or garbled
/// streams report the offset of the first bad chunk/segment.
pub fn decode_image(bytes: &[u8]) -> Result<RgbImage> {
    let format = sniff_format(bytes)?;
    let payload_offset = match format {
        EncodedFormat::Png => scan_png(bytes)?,
        EncodedFormat::Jpeg => scan_jpeg(bytes)?,
    };
    let image_format = match format {
        EncodedFormat::Png => ImageFormat::Png,
        EncodedFormat::Jpeg => ImageFormat::Jpeg,
    };
    let decoded = image::load_from_memory_with_format(bytes, image_format).map_err(|e| Error::Decode {
        offset: payload_offset,
        message: e.to_string(),
    })?;
    let rgb = decoded.to_rgb8();
    let (w, h) = rgb.dimensions();
    RgbImage::new(w as usize, h as usize, rgb.into_raw())
}

/// Returns the offset of the first IDAT chunk.
fn scan_png(bytes: &[u8]) -> Result<usize> {
    if bytes.len() < PNG_MAGIC.len() || bytes[..8] != PNG_MAGIC {
        return Err(Error::Decode {
            offset: 0,
            message: "bad PNG signature".into(),
        });
    }
    let mut pos = 8;
    let mut first_idat = None;
    loop {
        if pos + 8 > bytes.len() {
            return Err(Error::Decode {
                offset: pos,
                message: "truncated PNG chunk header".into(),
            });
        }
        let len = u32::from_be_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        let kind = &bytes[pos + 4..pos + 8];
        if !kind.iter().all(u8::is_ascii_alphabetic) {
            return Err(Error::Decode {
                offset: pos + 4,
                message: format!("invalid PNG chunk type {kind:02X?}"),
            });
        }
        let end = pos + 12 + len;
        if end > bytes.len() {
            return Err(Error::Decode {
                offset: pos,
                message: format!(
                    "PNG chunk {} declares {len} bytes but stream ends",
                    String::from_utf8_lossy(kind)
                ),
            });
        }
        if kind == b"IDAT" && first_idat.is_none() {
            first_idat = Some(pos);
        }
        if kind == b"IEND" {
            break;
        }
        pos = end;
    }
    first_idat.ok_or(Error::Decode {
        offset: pos,
        message: "PNG stream has no IDAT chunk".into(),
    })
}

/// Returns the offset of the first SOS marker.
fn scan_jpeg(bytes: &[u8]) -> Result<usize> {
    let mut pos = 2;
    let mut first_sos = None;
    loop {
        if pos + 2 > bytes.len() {
            return Err(Error::Decode {
                offset: pos,
                message: "JPEG stream ends before EOI".into(),
            });
        }
        if bytes[pos] != 0xFF {
            return Err(Error::Decode {
                offset: pos,
                message: format!("expected JPEG marker, found {:02X}", bytes[pos]),
            });
        }
        let marker = bytes[pos + 1];
        match marker {
            0xD9 => break,
            0xFF => {
                pos += 1;
                continue;
            }
            0x01 | 0xD0..=0xD7 => {
                pos += 2;
                continue;
            }
            _ => {}
        }
        if pos + 4 > bytes.len() {
            return Err(Error::Decode {
                offset: pos,
                message: "truncated JPEG segment length".into(),
            });
        }
        let len = u16::from_be_bytes([bytes[pos + 2], bytes[pos + 3]]) as usize;
        if len < 2 || pos + 2 + len > bytes.len() {
            return Err(Error::Decode {
                offset: pos,
                message: format!("JPEG segment {marker:02X} declares {len} bytes but stream ends"),
            });
        }
        pos += 2 + len;
        if marker == 0xDA {
            first_sos.get_or_insert(pos - 2 - len);
            // Entropy-coded data runs until a marker other than a stuffed
            // zero or a restart marker.
            loop {
                if pos + 1 >= bytes.len() {
                    return Err(Error::Decode {
                        offset: bytes.len(),
                        message: "JPEG scan data ends before EOI".into(),
                    });
                }
                if bytes[pos] == 0xFF && !matches!(bytes[pos + 1], 0x00 | 0xD0..=0xD7) {
                    break;
                }
                pos += 1;
            }
        }
    }
    first_sos.ok_or(Error::Decode {
        offset: pos,
        message: "JPEG stream has no scan".into(),
    })
}

/// Reads an image file, checking that the extension and magic bytes agree.
pub fn load_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let expected = match ext.as_str() {
        "png" => EncodedFormat::Png,
        "jpg" | "jpeg" => EncodedFormat::Jpeg,
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "{}: extension {other:?} is not .png/.jpg/.jpeg",
                path.display()
            )))
        }
    };
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let found = sniff_format(&bytes)?;
    if found != expected {
        return Err(Error::UnsupportedFormat(format!(
            "{}: extension says {expected:?} but content is {found:?}",
            path.display()
        )));
    }
    decode_image(&bytes)
}

pub fn is_supported_extension(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn to_image_buffer(img: &RgbImage) -> image::RgbImage {
    image::RgbImage::from_raw(img.width as u32, img.height as u32, img.pixels.clone())
        .expect("buffer length checked at construction")
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    to_image_buffer(img)
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::arg(format!("PNG encoding failed: {e}")))?;
    Ok(out.into_inner())
}

/// Baseline JPEG at quality `qf` (1..=100), 4:4:4, IJG-scaled standard tables.
pub fn encode_jpeg(img: &RgbImage, qf: u8) -> Result<Vec<u8>> {
    if !(1..=100).contains(&qf) {
        return Err(Error::arg(format!("JPEG quality factor {qf} outside 1..=100")));
    }
    let mut out = Vec::new();
    let encoder = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut out, qf);
    to_image_buffer(img)
        .write_with_encoder(encoder)
        .map_err(|e| Error::arg(format!("JPEG encoding failed: {e}")))?;
    Ok(out)
}

pub fn save_png(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_png(img)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[inline]
fn round_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Resizes to `target_w`x`target_h`.
///
/// Nearest samples `floor((dst + 0.5) * scale)`; bilinear samples at
/// `(dst + 0.5) * scale - 0.5` with edge clamping (align-corners = false).
pub fn resize_image(img: &RgbImage, target_w: usize, target_h: usize, method: ResizeMethod) -> Result<RgbImage> {
    if target_w == 0 || target_h == 0 {
        return Err(Error::arg(format!("resize target {target_w}x{target_h} has a zero side")));
    }
    if target_w == img.width && target_h == img.height {
        return Ok(img.clone());
    }
    let sx = img.width as f64 / target_w as f64;
    let sy = img.height as f64 / target_h as f64;
    let out = match method {
        ResizeMethod::Nearest => {
            let xs: Vec<usize> = (0..target_w)
                .map(|d| (((d as f64 + 0.5) * sx).floor() as usize).min(img.width - 1))
                .collect();
            let ys: Vec<usize> = (0..target_h)
                .map(|d| (((d as f64 + 0.5) * sy).floor() as usize).min(img.height - 1))
                .collect();
            RgbImage::from_fn(target_w, target_h, |x, y| img.get(xs[x], ys[y]))
        }
        ResizeMethod::Bilinear => {
            let xs = bilinear_taps(img.width, target_w, sx);
            let ys = bilinear_taps(img.height, target_h, sy);
            RgbImage::from_fn(target_w, target_h, |x, y| {
                let (x0, x1, tx) = xs[x];
                let (y0, y1, ty) = ys[y];
                let p00 = img.get(x0, y0);
                let p01 = img.get(x1, y0);
                let p10 = img.get(x0, y1);
                let p11 = img.get(x1, y1);
                let mut px = [0u8; 3];
                for c in 0..3 {
                    let top = f64::from(p00[c]) * (1.0 - tx) + f64::from(p01[c]) * tx;
                    let bottom = f64::from(p10[c]) * (1.0 - tx) + f64::from(p11[c]) * tx;
                    px[c] = round_u8(top * (1.0 - ty) + bottom * ty);
                }
                px
            })
        }
    };
    Ok(out)
}

fn bilinear_taps(src: usize, dst: usize, scale: f64) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let t = if i1 == i0 { 0.0 } else { s - i0 as f64 };
            (i0, i1, t)
        })
        .collect()
}

/// Number of whole `n`x`n` tiles per row and per column.
pub fn patch_grid(img: &RgbImage, n: usize) -> (usize, usize) {
    if n == 0 {
        return (0, 0);
    }
    (img.width / n, img.height / n)
}

/// Splits the image into non-overlapping `n`x`n` tiles in row-major grid
/// order. Right and bottom remainders narrower than `n` are dropped.
pub fn patchify(img: &RgbImage, n: usize) -> Result<Vec<Patch>> {
    if n == 0 {
        return Err(Error::arg("patch size must be positive"));
    }
    let (cols, rows) = patch_grid(img, n);
    if cols == 0 || rows == 0 {
        return Err(Error::EmptyGrid {
            width: img.width,
            height: img.height,
            n,
        });
    }
    let mut patches = Vec::with_capacity(cols * rows);
    for grid_row in 0..rows {
        for grid_col in 0..cols {
            patches.push(Patch {
                grid_row,
                grid_col,
                linear_index: grid_row * cols + grid_col,
                image: img.crop(grid_col * n, grid_row * n, n, n)?,
            });
        }
    }
    Ok(patches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn single_pixel_png_round_trip() {
        let img = RgbImage::new(1, 1, vec![7, 8, 9]).unwrap();
        let decoded = decode_image(&encode_png(&img).unwrap()).unwrap();
        assert_eq!(decoded.width(), 1);
        assert_eq!(decoded.pixels(), &[7, 8, 9]);
    }

    #[test]
    fn solid_red_png() {
        let img = RgbImage::filled(4, 4, [255, 0, 0]);
        let decoded = decode_image(&encode_png(&img).unwrap()).unwrap();
        assert!(decoded.pixels().chunks(3).all(|p| p == [255, 0, 0]));
        assert_eq!(decoded.pixels().len(), 48);
    }

    #[test]
    fn random_png_round_trip_is_bitwise() {
        let img = random_image(64, 64, 11);
        assert_eq!(decode_image(&encode_png(&img).unwrap()).unwrap(), img);
    }

    #[test]
    fn truncated_png_names_offset() {
        let bytes = encode_png(&random_image(16, 16, 3)).unwrap();
        let cut = &bytes[..bytes.len() - 20];
        match decode_image(cut) {
            Err(Error::Decode { offset, .. }) => assert!(offset > 8 && offset < cut.len()),
            other => panic!("expected decode error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_jpeg_is_decode_error() {
        let bytes = encode_jpeg(&random_image(16, 16, 3), 90).unwrap();
        assert!(matches!(decode_image(&bytes[..bytes.len() / 2]), Err(Error::Decode { .. })));
        assert_eq!(decode_image(&bytes).unwrap().width(), 16);
    }

    #[test]
    fn unknown_magic_is_unsupported() {
        assert!(matches!(decode_image(b"GIF89a...."), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn extension_must_match_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jpg");
        std::fs::write(&path, encode_png(&random_image(4, 4, 1)).unwrap()).unwrap();
        assert!(matches!(load_image(&path), Err(Error::UnsupportedFormat(_))));
        let gif = dir.path().join("x.gif");
        std::fs::write(&gif, b"GIF89a").unwrap();
        assert!(matches!(load_image(&gif), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = RgbImage::filled(7, 5, [12, 200, 99]);
        for method in [ResizeMethod::Nearest, ResizeMethod::Bilinear] {
            let out = resize_image(&img, 13, 3, method).unwrap();
            assert_eq!((out.width(), out.height()), (13, 3));
            assert!(out.pixels().chunks(3).all(|p| p == [12, 200, 99]));
        }
    }

    #[test]
    fn nearest_doubling_replicates_blocks() {
        let img = random_image(2, 2, 5);
        let out = resize_image(&img, 4, 4, ResizeMethod::Nearest).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(out.get(x, y), img.get(x / 2, y / 2));
            }
        }
    }

    #[test]
    fn bilinear_two_to_four() {
        // Sample positions -0.25 (clamped), 0.25, 0.75, 1.25 (clamped).
        let img = RgbImage::new(2, 1, vec![0, 0, 0, 255, 255, 255]).unwrap();
        let out = resize_image(&img, 4, 1, ResizeMethod::Bilinear).unwrap();
        let row: Vec<u8> = (0..4).map(|x| out.get(x, 0)[0]).collect();
        assert_eq!(row, vec![0, 64, 191, 255]);
    }

    #[test]
    fn zero_target_rejected() {
        let img = RgbImage::filled(2, 2, [0; 3]);
        assert!(matches!(resize_image(&img, 0, 2, ResizeMethod::Nearest), Err(Error::Argument(_))));
    }

    #[test]
    fn patchify_exact_and_remainder() {
        let p = patchify(&RgbImage::filled(64, 64, [1, 2, 3]), 32).unwrap();
        assert_eq!(p.iter().map(|p| p.linear_index).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert_eq!(patchify(&RgbImage::filled(70, 65, [0; 3]), 32).unwrap().len(), 4);
        assert!(matches!(
            patchify(&RgbImage::filled(31, 64, [0; 3]), 32),
            Err(Error::EmptyGrid { .. })
        ));
    }

    #[test]
    fn patchify_reassembles_source() {
        let img = random_image(96, 96, 21);
        let patches = patchify(&img, 32).unwrap();
        assert_eq!(patches.len(), 9);
        let mut rebuilt = RgbImage::filled(96, 96, [0; 3]);
        for p in &patches {
            let (ox, oy) = p.origin();
            for y in 0..32 {
                for x in 0..32 {
                    rebuilt.set(ox + x, oy + y, p.image.get(x, y));
                }
            }
        }
        assert_eq!(rebuilt, img);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn patchify_matches_crop(w in 1usize..80, h in 1usize..80, n in 1usize..24, seed: u64) {
            let img = random_image(w, h, seed);
            match patchify(&img, n) {
                Ok(patches) => {
                    let cols = w / n;
                    for p in patches {
                        prop_assert_eq!(p.linear_index, p.grid_row * cols + p.grid_col);
                        let (ox, oy) = p.origin();
                        for y in 0..n {
                            for x in 0..n {
                                prop_assert_eq!(p.image.get(x, y), img.get(ox + x, oy + y));
                            }
                        }
                    }
                }
                Err(Error::EmptyGrid { .. }) => prop_assert!(w < n || h < n),
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }

        #[test]
        fn nearest_integer_upscale(w in 1usize..12, h in 1usize..12, s in 1usize..5, seed: u64) {
            let img = random_image(w, h, seed);
            let out = resize_image(&img, w * s, h * s, ResizeMethod::Nearest).unwrap();
            for y in 0..h * s {
                for x in 0..w * s {
                    prop_assert_eq!(out.get(x, y), img.get(x / s, y / s));
                }
            }
        }

        #[test]
        fn png_round_trip(w in 1usize..40, h in 1usize..40, seed: u64) {
            let img = random_image(w, h, seed);
            prop_assert_eq!(decode_image(&encode_png(&img).unwrap()).unwrap(), img);
        }
    }
}
