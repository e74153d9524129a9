//! Floating-point images in `[0, 1]`, bilinear resampling, and 8-bit PNG IO.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor};
use std::path::{Path, PathBuf};

/// Smallest side accepted for an [`ImageBuffer`].
pub const MIN_SIDE: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("image must be at least {MIN_SIDE}x{MIN_SIDE}, got {height}x{width}")]
    TooSmall { height: usize, width: usize },
    #[error("channel count must be 1 or 3, got {0}")]
    Channels(usize),
    #[error("expected {expected} values for the given shape, got {actual}")]
    Length { expected: usize, actual: usize },
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f32 },
    #[error("value {value} at index {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f32 },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("png decode: {0}")]
    Decode(String),
    #[error("png encode: {0}")]
    Encode(String),
}

/// `height x width x channels` image, row-major with interleaved channels.
#[derive(Clone, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl std::fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ImageBuffer({}x{}x{})", self.height, self.width, self.channels)
    }
}

fn check_shape(height: usize, width: usize, channels: usize, len: usize) -> Result<(), ImageError> {
    if height < MIN_SIDE || width < MIN_SIDE {
        return Err(ImageError::TooSmall { height, width });
    }
    if channels != 1 && channels != 3 {
        return Err(ImageError::Channels(channels));
    }
    let expected = height * width * channels;
    if len != expected {
        return Err(ImageError::Length { expected, actual: len });
    }
    Ok(())
}

impl ImageBuffer {
    /// Validating constructor: every value must already lie in `[0, 1]`.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        check_shape(height, width, channels, data.len())?;
        for (index, &value) in data.iter().enumerate() {
            if !value.is_finite() {
                return Err(ImageError::NonFinite { index, value });
            }
            if !(0.0..=1.0).contains(&value) {
                return Err(ImageError::OutOfRange { index, value });
            }
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self, ImageError> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Build from a per-sample function; results are clamped to `[0, 1]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self, ImageError> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        clamp_to_unit(height, width, channels, data)
    }

    /// Planar `[C, H, W]` values, clamped into range.
    pub fn from_planar(height: usize, width: usize, channels: usize, planar: &[f32]) -> Result<Self, ImageError> {
        check_shape(height, width, channels, planar.len())?;
        let hw = height * width;
        Self::from_fn(height, width, channels, |y, x, c| planar[c * hw + y * width + x])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width, channels)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Planar `[C, H, W]` copy.
    pub fn to_planar(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; hw * self.channels];
        for (i, px) in self.data.chunks_exact(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * hw + i] = v;
            }
        }
        out
    }

    /// Rec. 601 luma (or the single channel), row-major.
    pub fn luma(&self) -> Vec<f32> {
        if self.channels == 1 {
            return self.data.clone();
        }
        self.data.chunks_exact(3).map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).collect()
    }

    /// Replicate a single channel into three.
    pub fn to_rgb(&self) -> ImageBuffer {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        ImageBuffer { height: self.height, width: self.width, channels: 3, data }
    }

    pub fn same_dims(&self, other: &ImageBuffer) -> Result<(), ImageError> {
        if self.dims() != other.dims() {
            return Err(ImageError::ShapeMismatch(self.dims(), other.dims()));
        }
        Ok(())
    }

    /// Copy of the `h x w` window at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<ImageBuffer, ImageError> {
        assert!(top + h <= self.height && left + w <= self.width, "crop window out of bounds");
        let c = self.channels;
        let mut data = Vec::with_capacity(h * w * c);
        for y in top..top + h {
            let row = (y * self.width + left) * c;
            data.extend_from_slice(&self.data[row..row + w * c]);
        }
        check_shape(h, w, c, data.len())?;
        Ok(ImageBuffer { height: h, width: w, channels: c, data })
    }

    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> ImageBuffer {
        let (h, w, c) = self.dims();
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..h {
            for x in (0..w).rev() {
                let i = (y * w + x) * c;
                data.extend_from_slice(&self.data[i..i + c]);
            }
        }
        ImageBuffer { height: h, width: w, channels: c, data }
    }

    /// Rotate counter-clockwise by `quarter_turns * 90` degrees.
    pub fn rotate90(&self, quarter_turns: u8) -> ImageBuffer {
        let mut img = self.clone();
        for _ in 0..quarter_turns % 4 {
            let (h, w, c) = img.dims();
            let mut data = Vec::with_capacity(img.data.len());
            // new[y][x] = old[x][w-1-y], new dims (w, h)
            for y in 0..w {
                for x in 0..h {
                    let i = (x * w + (w - 1 - y)) * c;
                    data.extend_from_slice(&img.data[i..i + c]);
                }
            }
            img = ImageBuffer { height: w, width: h, channels: c, data };
        }
        img
    }

    /// Quantize to 8 bits and back (`round(v * 255) / 255`).
    pub fn quantized(&self) -> ImageBuffer {
        let data = self.data.iter().map(|&v| to_u8(v) as f32 / 255.0).collect();
        ImageBuffer { data, ..self.clone() }
    }
}

/// Clamp raw values into `[0, 1]`, rejecting NaN and infinities.
pub fn clamp_to_unit(height: usize, width: usize, channels: usize, mut data: Vec<f32>) -> Result<ImageBuffer, ImageError> {
    check_shape(height, width, channels, data.len())?;
    for (index, v) in data.iter_mut().enumerate() {
        if !v.is_finite() {
            return Err(ImageError::NonFinite { index, value: *v });
        }
        *v = v.clamp(0.0, 1.0);
    }
    Ok(ImageBuffer { height, width, channels, data })
}

/// Bilinear resampling with half-pixel centers and edge clamping, on raw
/// interleaved data of any size.
pub fn resample_bilinear(data: &[f32], (h, w, c): (usize, usize, usize), out_h: usize, out_w: usize) -> Vec<f32> {
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let (ys, xs) = (axis(h, out_h), axis(w, out_w));
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let at = |y: usize, x: usize| data[(y * w + x) * c + ch];
                let top = at(y0, x0) + (at(y0, x1) - at(y0, x0)) * fx;
                let bot = at(y1, x0) + (at(y1, x1) - at(y1, x0)) * fx;
                out.push(top + (bot - top) * fy);
            }
        }
    }
    out
}

/// Resize to `out_h x out_w` with the canonical bilinear resampler.
pub fn resize_bilinear(image: &ImageBuffer, out_h: usize, out_w: usize) -> Result<ImageBuffer, ImageError> {
    if out_h < MIN_SIDE || out_w < MIN_SIDE {
        return Err(ImageError::TooSmall { height: out_h, width: out_w });
    }
    if (out_h, out_w) == (image.height, image.width) {
        return Ok(image.clone());
    }
    let data = resample_bilinear(&image.data, image.dims(), out_h, out_w);
    clamp_to_unit(out_h, out_w, image.channels, data)
}

#[inline]
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Decode an 8-bit PNG. Grayscale is promoted to RGB when `channels == 3`;
/// alpha is dropped.
pub fn decode_png(bytes: &[u8], channels: usize) -> Result<ImageBuffer, ImageError> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| ImageError::Decode(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| ImageError::Decode("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| ImageError::Decode(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let src_c = info.color_type.samples();
    let px = &buf[..info.buffer_size()];
    let mut data = Vec::with_capacity(h * w * channels);
    for p in px.chunks_exact(src_c) {
        let (rgb, gray) = match src_c {
            1 | 2 => ([p[0]; 3], p[0]),
            _ => {
                let rgb = [p[0], p[1], p[2]];
                let y = 0.299 * rgb[0] as f32 + 0.587 * rgb[1] as f32 + 0.114 * rgb[2] as f32;
                (rgb, y.round() as u8)
            }
        };
        if channels == 3 {
            data.extend(rgb.iter().map(|&v| v as f32 / 255.0));
        } else {
            data.push(gray as f32 / 255.0);
        }
    }
    ImageBuffer::new(h, w, channels, data)
}

pub fn encode_png(image: &ImageBuffer) -> Result<Vec<u8>, ImageError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width as u32, image.height as u32);
        enc.set_color(if image.channels == 3 { png::ColorType::Rgb } else { png::ColorType::Grayscale });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| ImageError::Encode(e.to_string()))?;
        let bytes: Vec<u8> = image.data.iter().map(|&v| to_u8(v)).collect();
        writer.write_image_data(&bytes).map_err(|e| ImageError::Encode(e.to_string()))?;
    }
    Ok(out)
}

pub fn load_png(path: &Path, channels: usize) -> Result<ImageBuffer, ImageError> {
    let io = |source| ImageError::Io { path: path.to_path_buf(), source };
    let mut bytes = Vec::new();
    std::io::Read::read_to_end(&mut BufReader::new(File::open(path).map_err(io)?), &mut bytes).map_err(io)?;
    decode_png(&bytes, channels)
}

pub fn save_png(image: &ImageBuffer, path: &Path) -> Result<(), ImageError> {
    let io = |source| ImageError::Io { path: path.to_path_buf(), source };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let bytes = encode_png(image)?;
    std::io::Write::write_all(&mut BufWriter::new(File::create(path).map_err(io)?), &bytes).map_err(io)
}
