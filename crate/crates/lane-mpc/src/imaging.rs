//! Minimal 8-bit raster type with PNM file IO and the pixel-level operations
//! the lane-detection pipeline needs: resize, rotate, BGR→HSV, Gaussian blur,
//! binary threshold and morphological opening.
//!
//! Everything here is a pure function over immutable rasters. Border policies
//! are fixed per operation (clamp for resize/blur, zero-fill for rotate and
//! warp sources, zero-padding for erosion) so results are deterministic.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("invalid raster: {0}")]
    InvalidRaster(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("PNM format error in {field}: {detail}")]
    PnmFormat { field: &'static str, detail: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ImagingError>;

/// Row-major 8-bit image, 1 (grayscale) or 3 (BGR) channels.
#[derive(Clone, PartialEq, Eq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl fmt::Debug for Raster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Raster({}x{}x{}, {} bytes)",
            self.width,
            self.height,
            self.channels,
            self.data.len()
        )
    }
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(ImagingError::InvalidRaster(format!(
                "dimensions must be >= 1, got {width}x{height}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(ImagingError::InvalidRaster(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        let expect = width * height * channels;
        if data.len() != expect {
            return Err(ImagingError::InvalidRaster(format!(
                "data length {} != width*height*channels = {expect}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// All-zero raster of the given shape.
    pub fn zeros(width: usize, height: usize, channels: usize) -> Result<Self> {
        Self::new(width, height, channels, vec![0; width * height * channels])
    }

    /// Constant-valued raster.
    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(
            width,
            height,
            channels,
            vec![value; width * height * channels],
        )
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

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        debug_assert!(x < self.width && y < self.height && c < self.channels);
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        debug_assert!(x < self.width && y < self.height && c < self.channels);
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Bilinear sample of channel `c` at real-valued coordinates, with
    /// out-of-bounds source pixels treated as zero.
    pub fn sample_bilinear_zero(&self, x: f64, y: f64, c: usize) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let fetch = |xi: f64, yi: f64| -> f64 {
            if xi < 0.0 || yi < 0.0 || xi >= self.width as f64 || yi >= self.height as f64 {
                0.0
            } else {
                self.get(xi as usize, yi as usize, c) as f64
            }
        };
        let v00 = fetch(x0, y0);
        let v10 = fetch(x0 + 1.0, y0);
        let v01 = fetch(x0, y0 + 1.0);
        let v11 = fetch(x0 + 1.0, y0 + 1.0);
        (v00 * (1.0 - fx) + v10 * fx) * (1.0 - fy) + (v01 * (1.0 - fx) + v11 * fx) * fy
    }

    /// Bilinear sample with source coordinates clamped to the image bounds.
    pub fn sample_bilinear_clamp(&self, x: f64, y: f64, c: usize) -> f64 {
        let xc = x.clamp(0.0, (self.width - 1) as f64);
        let yc = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = xc.floor();
        let y0 = yc.floor();
        let fx = xc - x0;
        let fy = yc - y0;
        let x1 = (x0 + 1.0).min((self.width - 1) as f64);
        let y1 = (y0 + 1.0).min((self.height - 1) as f64);
        let v00 = self.get(x0 as usize, y0 as usize, c) as f64;
        let v10 = self.get(x1 as usize, y0 as usize, c) as f64;
        let v01 = self.get(x0 as usize, y1 as usize, c) as f64;
        let v11 = self.get(x1 as usize, y1 as usize, c) as f64;
        (v00 * (1.0 - fx) + v10 * fx) * (1.0 - fy) + (v01 * (1.0 - fx) + v11 * fx) * fy
    }
}

/// Square convolution kernel / morphology footprint with odd side length.
#[derive(Debug, Clone)]
pub struct Kernel2D {
    size: usize,
    weights: Vec<f64>,
}

impl Kernel2D {
    pub fn new(size: usize, weights: Vec<f64>) -> Result<Self> {
        if size.is_multiple_of(2) || size == 0 {
            return Err(ImagingError::InvalidArgument(format!(
                "kernel size must be odd and positive, got {size}"
            )));
        }
        if weights.len() != size * size {
            return Err(ImagingError::InvalidArgument(format!(
                "kernel needs {} weights, got {}",
                size * size,
                weights.len()
            )));
        }
        Ok(Self { size, weights })
    }

    /// Normalized 2-D Gaussian; weights sum to 1 within 1e-12.
    pub fn gaussian(size: usize, sigma: f64) -> Result<Self> {
        let taps = gaussian_taps(size, sigma)?;
        let mut weights = Vec::with_capacity(size * size);
        for wy in &taps {
            for wx in &taps {
                weights.push(wy * wx);
            }
        }
        Kernel2D::new(size, weights)
    }

    /// All-ones square footprint for morphology (weights are ignored there,
    /// only the extent matters).
    pub fn square_footprint(size: usize) -> Result<Self> {
        Kernel2D::new(size, vec![1.0; size * size])
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn radius(&self) -> usize {
        self.size / 2
    }
}

/// Normalized 1-D Gaussian taps with the centered index convention.
fn gaussian_taps(size: usize, sigma: f64) -> Result<Vec<f64>> {
    if size.is_multiple_of(2) || size == 0 {
        return Err(ImagingError::InvalidArgument(format!(
            "blur size must be odd and positive, got {size}"
        )));
    }
    if sigma <= 0.0 {
        return Err(ImagingError::InvalidArgument(format!(
            "blur sigma must be > 0, got {sigma}"
        )));
    }
    let r = (size / 2) as isize;
    let mut taps: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    Ok(taps)
}

// ---------------------------------------------------------------------------
// PNM (binary PGM "P5" / PPM "P6") IO
// ---------------------------------------------------------------------------

/// Loads a binary PGM (P5, one channel) or PPM (P6, three channels) file
/// with maxval 255. `#` comments in the header are skipped.
pub fn load_pnm(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| ImagingError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_pnm(&bytes)
}

/// Parses PNM bytes; see [`load_pnm`].
pub fn parse_pnm(bytes: &[u8]) -> Result<Raster> {
    let mut pos = 0usize;
    let magic = read_token(bytes, &mut pos, "magic")?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => {
            return Err(ImagingError::PnmFormat {
                field: "magic",
                detail: format!("expected P5 or P6, found {other:?}"),
            })
        }
    };
    let width = read_number(bytes, &mut pos, "width")?;
    let height = read_number(bytes, &mut pos, "height")?;
    let maxval = read_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(ImagingError::PnmFormat {
            field: "maxval",
            detail: format!("only maxval 255 supported, found {maxval}"),
        });
    }
    // A single whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(ImagingError::PnmFormat {
            field: "header",
            detail: "missing whitespace between maxval and payload".into(),
        });
    }
    pos += 1;
    let expect = width * height * channels;
    let payload = &bytes[pos..];
    if payload.len() < expect {
        return Err(ImagingError::PnmFormat {
            field: "payload",
            detail: format!("expected {expect} sample bytes, found {}", payload.len()),
        });
    }
    Raster::new(width, height, channels, payload[..expect].to_vec())
}

fn skip_whitespace_and_comments(bytes: &[u8], pos: &mut usize) {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            return;
        }
    }
}

fn read_token(bytes: &[u8], pos: &mut usize, field: &'static str) -> Result<String> {
    skip_whitespace_and_comments(bytes, pos);
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(ImagingError::PnmFormat {
            field,
            detail: "unexpected end of header".into(),
        });
    }
    String::from_utf8(bytes[start..*pos].to_vec()).map_err(|_| ImagingError::PnmFormat {
        field,
        detail: "non-ASCII header token".into(),
    })
}

fn read_number(bytes: &[u8], pos: &mut usize, field: &'static str) -> Result<usize> {
    let tok = read_token(bytes, pos, field)?;
    tok.parse::<usize>().map_err(|_| ImagingError::PnmFormat {
        field,
        detail: format!("not a decimal integer: {tok:?}"),
    })
}

/// Writes the canonical header `P5\n{w} {h}\n255\n` (or `P6`) followed by the
/// raw samples.
pub fn save_pnm(img: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| ImagingError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(&encode_pnm(img)).map_err(io_err)?;
    Ok(())
}

/// Canonical PNM encoding of a raster; see [`save_pnm`].
pub fn encode_pnm(img: &Raster) -> Vec<u8> {
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    out
}

// ---------------------------------------------------------------------------
// Geometry ops
// ---------------------------------------------------------------------------

/// Bilinear resize. Source coordinates follow the half-pixel convention
/// sx = (x+0.5)*w_in/w_out - 0.5, clamped to the image bounds.
pub fn resize(img: &Raster, out_w: usize, out_h: usize) -> Result<Raster> {
    if out_w == 0 || out_h == 0 {
        return Err(ImagingError::InvalidArgument(format!(
            "resize target must be >= 1, got {out_w}x{out_h}"
        )));
    }
    let mut out = Raster::zeros(out_w, out_h, img.channels())?;
    let sx_ratio = img.width() as f64 / out_w as f64;
    let sy_ratio = img.height() as f64 / out_h as f64;
    for y in 0..out_h {
        let sy = (y as f64 + 0.5) * sy_ratio - 0.5;
        for x in 0..out_w {
            let sx = (x as f64 + 0.5) * sx_ratio - 0.5;
            for c in 0..img.channels() {
                let v = img.sample_bilinear_clamp(sx, sy, c);
                out.set(x, y, c, v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(out)
}

/// Rotates about the image center `((w-1)/2, (h-1)/2)` by `angle_deg`
/// (positive angles carry +x toward +y in pixel coordinates). Inverse-mapped
/// with bilinear sampling; sources outside the image fill with 0.
pub fn rotate(img: &Raster, angle_deg: f64) -> Result<Raster> {
    let theta = angle_deg.to_radians();
    let (sin_t, cos_t) = theta.sin_cos();
    let cx = (img.width() - 1) as f64 / 2.0;
    let cy = (img.height() - 1) as f64 / 2.0;
    let mut out = Raster::zeros(img.width(), img.height(), img.channels())?;
    for y in 0..img.height() {
        let dy = y as f64 - cy;
        for x in 0..img.width() {
            let dx = x as f64 - cx;
            // inverse rotation of the output coordinate
            let sx = cos_t * dx + sin_t * dy + cx;
            let sy = -sin_t * dx + cos_t * dy + cy;
            for c in 0..img.channels() {
                let v = img.sample_bilinear_zero(sx, sy, c);
                out.set(x, y, c, v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Color
// ---------------------------------------------------------------------------

/// BGR → HSV split using the 8-bit convention: H on the 0–179 half-degree
/// scale, S and V on 0–255.
pub fn bgr_to_hsv(img: &Raster) -> Result<(Raster, Raster, Raster)> {
    if img.channels() != 3 {
        return Err(ImagingError::InvalidArgument(format!(
            "bgr_to_hsv needs a 3-channel raster, got {} channels",
            img.channels()
        )));
    }
    let (w, h) = (img.width(), img.height());
    let mut hb = Vec::with_capacity(w * h);
    let mut sb = Vec::with_capacity(w * h);
    let mut vb = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let b = img.get(x, y, 0) as f64;
            let g = img.get(x, y, 1) as f64;
            let r = img.get(x, y, 2) as f64;
            let (hh, ss, vv) = hsv_of_bgr(b, g, r);
            hb.push(hh);
            sb.push(ss);
            vb.push(vv);
        }
    }
    Ok((
        Raster::new(w, h, 1, hb)?,
        Raster::new(w, h, 1, sb)?,
        Raster::new(w, h, 1, vb)?,
    ))
}

/// Scalar HSV conversion for one BGR pixel, computed in double precision and
/// quantized at the end.
pub fn hsv_of_bgr(b: f64, g: f64, r: f64) -> (u8, u8, u8) {
    let v = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = v - min;
    let s = if v == 0.0 {
        0.0
    } else {
        255.0 * delta / v
    };
    let h_deg = if delta == 0.0 {
        0.0
    } else if v == r {
        60.0 * (g - b) / delta
    } else if v == g {
        120.0 + 60.0 * (b - r) / delta
    } else {
        240.0 + 60.0 * (r - g) / delta
    };
    let h_deg = if h_deg < 0.0 { h_deg + 360.0 } else { h_deg };
    let mut h8 = (h_deg / 2.0).round() as i32;
    if h8 >= 180 {
        h8 = 0;
    }
    (h8 as u8, s.round() as u8, v.round() as u8)
}

// ---------------------------------------------------------------------------
// Filtering
// ---------------------------------------------------------------------------

/// Separable Gaussian blur on a single-channel raster. The kernel is
/// normalized to sum 1; borders clamp to the edge sample. The intermediate
/// pass is kept in floating point so the result rounds exactly once.
pub fn gaussian_blur(img: &Raster, size: usize, sigma: f64) -> Result<Raster> {
    require_single_channel(img, "gaussian_blur")?;
    let taps = gaussian_taps(size, sigma)?;
    let r = (size / 2) as isize;
    let (w, h) = (img.width() as isize, img.height() as isize);

    // horizontal pass
    let mut mid = vec![0.0f64; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let sx = (x + k as isize - r).clamp(0, w - 1);
                acc += t * img.get(sx as usize, y as usize, 0) as f64;
            }
            mid[(y * w + x) as usize] = acc;
        }
    }
    // vertical pass
    let mut out = Raster::zeros(img.width(), img.height(), 1)?;
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let sy = (y + k as isize - r).clamp(0, h - 1);
                acc += t * mid[(sy * w + x) as usize];
            }
            out.set(x as usize, y as usize, 0, acc.round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

/// Strict binary threshold: sample > t maps to `maxval`, everything else to 0.
pub fn threshold_binary(img: &Raster, t: u8, maxval: u8) -> Result<Raster> {
    require_single_channel(img, "threshold_binary")?;
    let data = img
        .data()
        .iter()
        .map(|&v| if v > t { maxval } else { 0 })
        .collect();
    Raster::new(img.width(), img.height(), 1, data)
}

/// Morphological opening (erosion then dilation) with a square odd footprint.
/// Out-of-bounds neighbors count as 0, so erosion eats a border ring of a
/// fully white image.
pub fn morph_open(img: &Raster, footprint: &Kernel2D) -> Result<Raster> {
    require_single_channel(img, "morph_open")?;
    let maxval = match binary_level(img) {
        Some(m) => m,
        None => {
            return Err(ImagingError::InvalidArgument(
                "morph_open input must be binary (all samples 0 or one common nonzero level)"
                    .into(),
            ))
        }
    };
    if maxval == 0 {
        return Ok(img.clone()); // all-black image opens to itself
    }
    let eroded = morph_apply(img, footprint, true, maxval);
    Ok(morph_apply(&eroded, footprint, false, maxval))
}

/// Returns the single nonzero level of a binary raster, `Some(0)` for
/// all-black, or `None` if more than one nonzero level appears.
fn binary_level(img: &Raster) -> Option<u8> {
    let mut level = 0u8;
    for &v in img.data() {
        if v != 0 {
            if level == 0 {
                level = v;
            } else if v != level {
                return None;
            }
        }
    }
    Some(level)
}

fn morph_apply(img: &Raster, footprint: &Kernel2D, erode: bool, maxval: u8) -> Raster {
    let r = footprint.radius() as isize;
    let (w, h) = (img.width() as isize, img.height() as isize);
    let mut out = Raster::zeros(img.width(), img.height(), 1).expect("same shape");
    for y in 0..h {
        for x in 0..w {
            let mut acc: u8 = if erode { maxval } else { 0 };
            'scan: for dy in -r..=r {
                for dx in -r..=r {
                    let (sx, sy) = (x + dx, y + dy);
                    let v = if sx < 0 || sy < 0 || sx >= w || sy >= h {
                        0
                    } else {
                        img.get(sx as usize, sy as usize, 0)
                    };
                    if erode {
                        acc = acc.min(v);
                        if acc == 0 {
                            break 'scan;
                        }
                    } else {
                        acc = acc.max(v);
                        if acc == maxval {
                            break 'scan;
                        }
                    }
                }
            }
            out.set(x as usize, y as usize, 0, acc);
        }
    }
    out
}

fn require_single_channel(img: &Raster, op: &str) -> Result<()> {
    if img.channels() != 1 {
        return Err(ImagingError::InvalidArgument(format!(
            "{op} needs a 1-channel raster, got {} channels",
            img.channels()
        )));
    }
    Ok(())
}
