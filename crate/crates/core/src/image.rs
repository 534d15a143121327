//! Image values and binary portable pixmap I/O.
//!
//! Images are HWC row-major `f32` in [0, 1]. File formats are the binary
//! portable pixmap/graymap (P6/P5) with maxval 255: dependency-free and
//! bit-exact, which the determinism contracts rely on.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::numerics::kernels::resize_bilinear_fwd;
use crate::numerics::{Real, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::dim(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn full(height: usize, width: usize, channels: usize, v: f32) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![v; height * width * channels],
        }
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
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            vec![self.height, self.width, self.channels],
            self.data.iter().map(|&v| T::from_f32(v)).collect(),
        )
        .expect("consistent extents")
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(Error::dim(format!("image tensor must be HWC, got {:?}", s)));
        }
        Image::new(s[0], s[1], s[2], t.data().iter().map(|v| v.to_f32()).collect())
    }

    /// Rec. 601 luma; identity on single-channel images.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.height * self.width);
        for px in self.data.chunks(self.channels) {
            let v = if self.channels >= 3 {
                0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
            } else {
                px[0]
            };
            data.push(v);
        }
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// Align-corners bilinear resize.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Image {
        let mut out = Image::zeros(height, width, self.channels);
        resize_bilinear_fwd(
            &self.data,
            self.height,
            self.width,
            self.channels,
            height,
            width,
            &mut out.data,
        );
        out
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes P6 for 3-channel images, P5 for single-channel.
pub fn save_ppm(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = Vec::with_capacity(32 + img.data.len());
    match img.channels {
        1 => {
            write!(bytes, "P5\n{} {}\n255\n", img.width, img.height)?;
            bytes.extend(img.data.iter().map(|&v| quantize(v)));
        }
        3 => {
            write!(bytes, "P6\n{} {}\n255\n", img.width, img.height)?;
            bytes.extend(img.data.iter().map(|&v| quantize(v)));
        }
        c => {
            return Err(Error::arg(format!(
                "portable pixmap supports 1 or 3 channels, image has {c}"
            )))
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a binary P5/P6 file into [0, 1] floats.
pub fn load_ppm(path: impl AsRef<Path>) -> Result<Image> {
    let bytes = fs::read(path.as_ref())
        .map_err(|e| Error::data(format!("{}: {e}", path.as_ref().display())))?;
    parse_ppm(&bytes).map_err(|e| Error::data(format!("{}: {e}", path.as_ref().display())))
}

fn parse_ppm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0usize;
    let magic = next_token(bytes, &mut pos).ok_or("missing magic")?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        m => return Err(format!("unsupported magic {m:?}")),
    };
    let width: usize = next_token(bytes, &mut pos)
        .ok_or("missing width")?
        .parse()
        .map_err(|_| "bad width")?;
    let height: usize = next_token(bytes, &mut pos)
        .ok_or("missing height")?
        .parse()
        .map_err(|_| "bad height")?;
    let maxval: usize = next_token(bytes, &mut pos)
        .ok_or("missing maxval")?
        .parse()
        .map_err(|_| "bad maxval")?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // exactly one whitespace byte after maxval
    let n = height * width * channels;
    if bytes.len() < pos + n {
        return Err(format!("truncated raster: need {n} bytes"));
    }
    let data = bytes[pos..pos + n]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    Image::new(height, width, channels, data).map_err(|e| e.to_string())
}

/// Reads one whitespace/comment-delimited header token, then skips the single
/// whitespace byte that follows it.
fn next_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if *pos > start {
        let tok = String::from_utf8_lossy(&bytes[start..*pos]).into_owned();
        if *pos < bytes.len() {
            *pos += 1; // consume the single delimiter before binary data
        }
        Some(tok)
    } else {
        None
    }
}
