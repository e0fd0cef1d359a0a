//! RGB images and the two on-disk encodings (binary PPM and raw f32).

use crate::data::DataError;

/// Number of channels every image carries.
pub const CHANNELS: usize = 3;

const RAW_MAGIC: &[u8; 4] = b"AIMR";
const RAW_HEADER_LEN: usize = 16;

/// Row-major, channel-interleaved RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    /// Binary PPM (`P6`), maxval up to 255.
    PpmP6,
    /// `AIMR` magic, little-endian `u32` height/width/channels, then f32 samples.
    RawF32,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self, DataError> {
        if height == 0 || width == 0 || pixels.len() != height * width * CHANNELS {
            return Err(DataError::InvalidArgument(format!(
                "{} samples do not form a {height}x{width} RGB image",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(DataError::InvalidPixel { index: bad });
        }
        Ok(Self { height, width, pixels })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f32) -> Result<Self, DataError> {
        let mut pixels = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                for c in 0..CHANNELS {
                    pixels.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * CHANNELS + c]
    }

    pub fn flip_horizontal(&self) -> Self {
        self.remap(|y, x| (y, self.width - 1 - x))
    }

    pub fn flip_vertical(&self) -> Self {
        self.remap(|y, x| (self.height - 1 - y, x))
    }

    fn remap(&self, src: impl Fn(usize, usize) -> (usize, usize)) -> Self {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for y in 0..self.height {
            for x in 0..self.width {
                let (sy, sx) = src(y, x);
                let at = (sy * self.width + sx) * CHANNELS;
                pixels.extend_from_slice(&self.pixels[at..at + CHANNELS]);
            }
        }
        Self {
            height: self.height,
            width: self.width,
            pixels,
        }
    }

    pub fn encode(&self, format: ImageFormat) -> Vec<u8> {
        match format {
            ImageFormat::PpmP6 => {
                let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
                out.extend(self.pixels.iter().map(|&v| (v * 255.0).round() as u8));
                out
            }
            ImageFormat::RawF32 => {
                let mut out = Vec::with_capacity(RAW_HEADER_LEN + self.pixels.len() * 4);
                out.extend_from_slice(RAW_MAGIC);
                for n in [self.height, self.width, CHANNELS] {
                    out.extend_from_slice(&(n as u32).to_le_bytes());
                }
                for v in &self.pixels {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out
            }
        }
    }
}

pub fn decode_image(bytes: &[u8], format: ImageFormat) -> Result<Image, DataError> {
    match format {
        ImageFormat::PpmP6 => decode_ppm(bytes),
        ImageFormat::RawF32 => decode_raw(bytes),
    }
}

/// Reads the next whitespace-delimited header token, skipping `#` comments.
fn ppm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8], DataError> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' && bytes[*pos] != b'\r' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(DataError::MalformedHeader("unexpected end of PPM header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn ppm_number(bytes: &[u8], pos: &mut usize, field: &str) -> Result<u32, DataError> {
    let tok = ppm_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse::<u32>().ok())
        .ok_or_else(|| DataError::MalformedHeader(format!("PPM {field} is not a number")))
}

fn decode_ppm(bytes: &[u8]) -> Result<Image, DataError> {
    let mut pos = 0;
    if ppm_token(bytes, &mut pos)? != b"P6" {
        return Err(DataError::MalformedHeader("missing P6 magic".into()));
    }
    let width = ppm_number(bytes, &mut pos, "width")? as usize;
    let height = ppm_number(bytes, &mut pos, "height")? as usize;
    let maxval = ppm_number(bytes, &mut pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(DataError::MalformedHeader("zero image dimension".into()));
    }
    if maxval == 0 {
        return Err(DataError::MalformedHeader("maxval must be positive".into()));
    }
    if maxval > 255 {
        return Err(DataError::UnsupportedMaxval(maxval));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(DataError::MalformedHeader("missing separator after maxval".into()));
    }
    pos += 1;
    let expected = width * height * CHANNELS;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(DataError::TruncatedPayload {
            expected,
            got: payload.len(),
        });
    }
    let scale = maxval as f32;
    let pixels = payload[..expected]
        .iter()
        .map(|&b| {
            if u32::from(b) > maxval {
                Err(DataError::MalformedHeader(format!(
                    "sample {b} exceeds maxval {maxval}"
                )))
            } else {
                Ok(f32::from(b) / scale)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Image::new(height, width, pixels)
}

fn decode_raw(bytes: &[u8]) -> Result<Image, DataError> {
    if bytes.len() < RAW_HEADER_LEN || &bytes[..4] != RAW_MAGIC {
        return Err(DataError::MalformedHeader("missing AIMR header".into()));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (height, width, channels) = (field(0), field(1), field(2));
    if height == 0 || width == 0 {
        return Err(DataError::MalformedHeader("zero image dimension".into()));
    }
    if channels != CHANNELS {
        return Err(DataError::UnsupportedChannels(channels));
    }
    let expected = height * width * CHANNELS * 4;
    let payload = &bytes[RAW_HEADER_LEN..];
    if payload.len() < expected {
        return Err(DataError::TruncatedPayload {
            expected,
            got: payload.len(),
        });
    }
    let pixels = payload[..expected]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Image::new(height, width, pixels)
}
