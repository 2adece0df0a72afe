//! Floating-point rasters, PNG codec, patch extraction and augmentation.
//!
//! Samples are stored row-major and channel-interleaved: the sample for
//! pixel `(x, y)` and channel `c` lives at `(y * width + x) * channels + c`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

/// A 1- or 3-channel image with samples in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

/// Rectangular region of an image, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchRegion {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl PatchRegion {
    pub fn new(x0: usize, y0: usize, width: usize, height: usize) -> Self {
        Self {
            x0,
            y0,
            width,
            height,
        }
    }

    fn fits(&self, img: &Image) -> bool {
        self.width >= 1
            && self.height >= 1
            && self.x0.checked_add(self.width).is_some_and(|e| e <= img.width)
            && self.y0.checked_add(self.height).is_some_and(|e| e <= img.height)
    }
}

impl std::fmt::Display for PatchRegion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}+{}+{}", self.width, self.height, self.x0, self.y0)
    }
}

impl Image {
    /// Build an image from interleaved samples, checking every invariant.
    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("dimensions", format!("{width}x{height} is empty")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid("channels", format!("{channels} (expected 1 or 3)")));
        }
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch(format!(
                "{} samples for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::invalid("sample", format!("{bad} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Build an image from samples that are clamped into [0, 1] first.
    /// NaN samples become 0.
    pub fn from_vec_clamped(
        width: usize,
        height: usize,
        channels: usize,
        mut data: Vec<f64>,
    ) -> Result<Self> {
        for s in &mut data {
            *s = if s.is_nan() { 0.0 } else { s.clamp(0.0, 1.0) };
        }
        Self::from_vec(width, height, channels, data)
    }

    /// An image filled with a single value per channel.
    pub fn filled(width: usize, height: usize, pixel: &[f64]) -> Result<Self> {
        let data = pixel
            .iter()
            .copied()
            .cycle()
            .take(width * height * pixel.len())
            .collect();
        Self::from_vec(width, height, pixel.len(), data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    /// All channel samples of pixel `(x, y)`.
    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.index(x, y, 0);
        &self.data[i..i + self.channels]
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Largest sample over all pixels and channels.
    pub fn max_sample(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    /// Multiply every sample by `k` in [0, 1].
    pub fn scaled(&self, k: f64) -> Result<Image> {
        if !(0.0..=1.0).contains(&k) {
            return Err(Error::invalid("scale", format!("{k} outside [0, 1]")));
        }
        Ok(Image {
            data: self.data.iter().map(|s| s * k).collect(),
            ..self.clone()
        })
    }

    /// Rec. 601 luma per pixel; the single channel itself for gray images.
    pub fn luminance(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.data.clone();
        }
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }
}

/// Load an 8- or 16-bit grayscale or RGB PNG, scaling samples into [0, 1].
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let decode_err = |reason: String| Error::Decode {
        path: path.to_path_buf(),
        reason,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| decode_err(e.to_string()))?;

    let (color, depth) = reader.output_color_type();
    let channels = match color {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(decode_err(format!("unsupported colour type {other:?}"))),
    };
    let bytes_per_sample = match depth {
        png::BitDepth::Eight => 1,
        png::BitDepth::Sixteen => 2,
        other => return Err(decode_err(format!("unsupported bit depth {other:?}"))),
    };

    let size = reader
        .output_buffer_size()
        .ok_or_else(|| decode_err("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| decode_err(e.to_string()))?;
    let (width, height) = (info.width as usize, info.height as usize);
    let row_len = width * channels * bytes_per_sample;

    let mut data = Vec::with_capacity(width * height * channels);
    for row in buf.chunks(info.line_size).take(height) {
        let row = &row[..row_len];
        if bytes_per_sample == 1 {
            data.extend(row.iter().map(|&b| b as f64 / 255.0));
        } else {
            data.extend(
                row.chunks_exact(2)
                    .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / 65535.0),
            );
        }
    }
    Image::from_vec(width, height, channels, data)
}

/// Quantize one sample with round-half-up.
#[inline]
pub fn quantize(sample: f64, max: u32) -> u32 {
    ((sample.clamp(0.0, 1.0) * max as f64) + 0.5).floor() as u32
}

/// Save as PNG with 8 or 16 bits per sample.
pub fn save_image(img: &Image, path: impl AsRef<Path>, bit_depth: u8) -> Result<()> {
    let path = path.as_ref();
    let (depth, max) = match bit_depth {
        8 => (png::BitDepth::Eight, 255),
        16 => (png::BitDepth::Sixteen, 65535),
        d => return Err(Error::invalid("bit_depth", format!("{d} (expected 8 or 16)"))),
    };
    let bytes: Vec<u8> = if bit_depth == 8 {
        img.data.iter().map(|&s| quantize(s, max) as u8).collect()
    } else {
        img.data
            .iter()
            .flat_map(|&s| (quantize(s, max) as u16).to_be_bytes())
            .collect()
    };

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    encoder.set_color(if img.channels == 1 {
        png::ColorType::Grayscale
    } else {
        png::ColorType::Rgb
    });
    encoder.set_depth(depth);
    let to_io = |e: png::EncodingError| match e {
        png::EncodingError::IoError(e) => Error::io(path, e),
        other => Error::io(path, std::io::Error::other(other.to_string())),
    };
    let mut writer = encoder.write_header().map_err(to_io)?;
    writer.write_image_data(&bytes).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

/// PNG files directly inside `dir`, sorted by file name.
pub fn list_pngs(dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Copy out a rectangular region.
pub fn crop_patch(img: &Image, region: PatchRegion) -> Result<Image> {
    if !region.fits(img) {
        return Err(Error::Bounds {
            region: region.to_string(),
            width: img.width,
            height: img.height,
        });
    }
    let c = img.channels;
    let mut data = Vec::with_capacity(region.width * region.height * c);
    for y in region.y0..region.y0 + region.height {
        let start = img.index(region.x0, y, 0);
        data.extend_from_slice(&img.data[start..start + region.width * c]);
    }
    Ok(Image {
        width: region.width,
        height: region.height,
        channels: c,
        data,
    })
}

/// Write `patch` into `dst` with its top-left corner at `(x0, y0)`.
pub fn paste(dst: &mut Image, patch: &Image, x0: usize, y0: usize) -> Result<()> {
    let region = PatchRegion::new(x0, y0, patch.width, patch.height);
    if !region.fits(dst) {
        return Err(Error::Bounds {
            region: region.to_string(),
            width: dst.width,
            height: dst.height,
        });
    }
    if patch.channels != dst.channels {
        return Err(Error::DimensionMismatch(format!(
            "{} channel patch into {} channel image",
            patch.channels, dst.channels
        )));
    }
    let c = dst.channels;
    for y in 0..patch.height {
        let src = patch.index(0, y, 0);
        let dst_start = dst.index(x0, y0 + y, 0);
        dst.data[dst_start..dst_start + patch.width * c]
            .copy_from_slice(&patch.data[src..src + patch.width * c]);
    }
    Ok(())
}

/// Rotate clockwise by `rot90` quarter turns, then optionally mirror
/// left-right.
pub fn augment(img: &Image, rot90: u8, hflip: bool) -> Image {
    let turns = rot90 % 4;
    let (w, h, c) = (img.width, img.height, img.channels);
    let (ow, oh) = if turns % 2 == 1 { (h, w) } else { (w, h) };
    let mut data = vec![0.0; img.data.len()];
    for oy in 0..oh {
        for ox in 0..ow {
            let fx = if hflip { ow - 1 - ox } else { ox };
            let (sx, sy) = match turns {
                0 => (fx, oy),
                1 => (oy, h - 1 - fx),
                2 => (w - 1 - fx, h - 1 - oy),
                _ => (w - 1 - oy, fx),
            };
            let src = img.index(sx, sy, 0);
            let dst = (oy * ow + ox) * c;
            data[dst..dst + c].copy_from_slice(&img.data[src..src + c]);
        }
    }
    Image {
        width: ow,
        height: oh,
        channels: c,
        data,
    }
}


#[cfg(test)]
mod tests {
    use super::test_util::random_image;
    use super::*;
    use proptest::prelude::*;

    fn sorted(mut v: Vec<f64>) -> Vec<f64> {
        v.sort_by(f64::total_cmp);
        v
    }

    #[test]
    fn rejects_out_of_range_and_bad_shapes() {
        assert!(Image::from_vec(1, 1, 1, vec![1.5]).is_err());
        assert!(Image::from_vec(0, 1, 1, vec![]).is_err());
        assert!(Image::from_vec(2, 1, 3, vec![0.0; 5]).is_err());
        assert!(Image::from_vec(1, 1, 2, vec![0.0; 2]).is_err());
    }

    #[test]
    fn eight_bit_rgb_pixel_scales_by_255() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.png");
        let file = File::create(&path).unwrap();
        let mut enc = png::Encoder::new(BufWriter::new(file), 1, 1);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        enc.write_header().unwrap().write_image_data(&[255, 128, 0]).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.pixel(0, 0), &[1.0, 128.0 / 255.0, 0.0]);
    }

    #[test]
    fn sixteen_bit_gray_max_is_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        let file = File::create(&path).unwrap();
        let mut enc = png::Encoder::new(BufWriter::new(file), 2, 1);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        enc.write_header().unwrap().write_image_data(&[0xFF, 0xFF, 0, 0]).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.channels(), 1);
        assert_eq!(img.data(), &[1.0, 0.0]);
    }

    #[test]
    fn alpha_and_low_bit_depths_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let rgba = dir.path().join("a.png");
        let mut enc = png::Encoder::new(BufWriter::new(File::create(&rgba).unwrap()), 1, 1);
        enc.set_color(png::ColorType::Rgba);
        enc.set_depth(png::BitDepth::Eight);
        enc.write_header().unwrap().write_image_data(&[1, 2, 3, 4]).unwrap();
        let err = load_image(&rgba).unwrap_err().to_string();
        assert!(err.contains("colour type"), "{err}");

        let gray4 = dir.path().join("g4.png");
        let mut enc = png::Encoder::new(BufWriter::new(File::create(&gray4).unwrap()), 2, 1);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Four);
        enc.write_header().unwrap().write_image_data(&[0x12]).unwrap();
        let err = load_image(&gray4).unwrap_err().to_string();
        assert!(err.contains("bit depth"), "{err}");

        assert!(load_image(dir.path().join("missing.png")).unwrap_err().is_io());
    }

    #[test]
    fn quantization_is_round_half_up() {
        assert_eq!(quantize(0.5, 255), 128);
        assert_eq!(quantize(0.0, 255), 0);
        assert_eq!(quantize(1.0, 255), 255);
        assert_eq!(quantize(1.0, 65535), 65535);
    }

    #[test]
    fn save_load_error_bound_over_all_8bit_levels() {
        let dir = tempfile::tempdir().unwrap();
        // Every 8-bit level plus the midpoints between levels.
        let data: Vec<f64> = (0..=510).map(|k| k as f64 / 510.0).collect();
        let img = Image::from_vec(data.len(), 1, 1, data).unwrap();
        for depth in [8u8, 16] {
            let path = dir.path().join(format!("levels{depth}.png"));
            save_image(&img, &path, depth).unwrap();
            let back = load_image(&path).unwrap();
            let bound = 0.5 / ((1u32 << depth) - 1) as f64 + 1e-12;
            for (a, b) in img.data().iter().zip(back.data()) {
                assert!((a - b).abs() <= bound, "{a} -> {b} at {depth} bits");
            }
        }
    }

    #[test]
    fn unwritable_path_is_an_io_error() {
        let img = random_image(2, 2, 1, 1);
        let err = save_image(&img, "/nonexistent-dir/x.png", 8).unwrap_err();
        assert!(err.is_io());
    }

    #[test]
    fn crop_full_and_single_pixel() {
        let img = random_image(5, 6, 3, 2);
        assert_eq!(crop_patch(&img, PatchRegion::new(0, 0, 5, 6)).unwrap(), img);
        let px = crop_patch(&img, PatchRegion::new(2, 3, 1, 1)).unwrap();
        assert_eq!(px.data(), img.pixel(2, 3));
    }

    #[test]
    fn crop_out_of_bounds_names_dims() {
        let img = random_image(5, 6, 1, 3);
        let err = crop_patch(&img, PatchRegion::new(3, 0, 3, 2)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("3x2+3+0") && msg.contains("5x6"), "{msg}");
    }

    #[test]
    fn augment_identity_and_group_law() {
        let img = random_image(7, 4, 3, 4);
        assert_eq!(augment(&img, 0, false), img);
        let mut r = img.clone();
        for _ in 0..4 {
            r = augment(&r, 1, false);
        }
        assert_eq!(r, img);
        assert_eq!(augment(&augment(&img, 0, true), 0, true), img);
        assert_eq!(augment(&augment(&img, 1, false), 3, false), img);
    }

    #[test]
    fn clockwise_quarter_turn_moves_top_left_to_top_right() {
        let img = Image::from_vec(2, 3, 1, vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        let r = augment(&img, 1, false);
        assert_eq!((r.width(), r.height()), (3, 2));
        assert_eq!(r.get(2, 0, 0), 0.0);
        assert_eq!(r.get(0, 0, 0), 0.4);
    }

    proptest! {
        #[test]
        fn crop_then_paste_is_identity(
            w in 1usize..20, h in 1usize..20, seed in any::<u64>(),
            fx in 0.0f64..1.0, fy in 0.0f64..1.0, fw in 0.0f64..1.0, fh in 0.0f64..1.0,
        ) {
            let img = random_image(w, h, 3, seed);
            let x0 = (fx * w as f64) as usize;
            let y0 = (fy * h as f64) as usize;
            let pw = 1 + (fw * (w - x0) as f64) as usize;
            let ph = 1 + (fh * (h - y0) as f64) as usize;
            let pw = pw.min(w - x0);
            let ph = ph.min(h - y0);
            let patch = crop_patch(&img, PatchRegion::new(x0, y0, pw, ph)).unwrap();
            prop_assert_eq!((patch.width(), patch.height()), (pw, ph));
            let mut copy = img.clone();
            paste(&mut copy, &patch, x0, y0).unwrap();
            prop_assert_eq!(copy, img);
        }

        #[test]
        fn augment_preserves_sample_multiset(
            w in 1usize..12, h in 1usize..12, rot in 0u8..4, flip in any::<bool>(), seed in any::<u64>(),
        ) {
            let img = random_image(w, h, 3, seed);
            let out = augment(&img, rot, flip);
            prop_assert_eq!(out.data().len(), img.data().len());
            prop_assert_eq!(sorted(out.data().to_vec()), sorted(img.data().to_vec()));
        }

        #[test]
        fn eight_bit_round_trip_within_half_step(seed in any::<u64>()) {
            let dir = tempfile::tempdir().unwrap();
            let img = random_image(6, 5, 3, seed);
            let path = dir.path().join("r.png");
            save_image(&img, &path, 8).unwrap();
            let back = load_image(&path).unwrap();
            for (a, b) in img.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }
}
