//! ECG report preprocessing: grayscale ingestion, ROI cropping,
//! global-threshold binarization, per-lead splitting, and nearest-neighbor
//! resizing.
//!
//! A report scan goes through `to_grayscale → crop_roi → binarize →
//! split_leads → resize_nearest`, producing twelve square binary lead
//! images. Every step is a pure function of its inputs, so reports can be
//! processed in parallel and two runs over the same file yield identical
//! bytes.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("zero-sized image ({width}x{height})")]
    ZeroSized { width: usize, height: usize },
    #[error("pixel buffer of length {len} does not match {width}x{height}x{channels}")]
    BufferMismatch {
        len: usize,
        width: usize,
        height: usize,
        channels: usize,
    },
    #[error("roi ({x},{y}) {w}x{h} exceeds image bounds {width}x{height}")]
    RoiOutOfBounds {
        x: usize,
        y: usize,
        w: usize,
        h: usize,
        width: usize,
        height: usize,
    },
    #[error("grid {rows}x{cols} does not cover 12 leads")]
    BadGrid { rows: usize, cols: usize },
    #[error("image {width}x{height} too small for a {rows}x{cols} grid")]
    GridTooFine {
        width: usize,
        height: usize,
        rows: usize,
        cols: usize,
    },
    #[error("expected {expected} lead labels, got {got}")]
    WrongLabelCount { expected: usize, got: usize },
    #[error("unknown lead label {0:?}")]
    UnknownLead(String),
    #[error("failed to read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to decode {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("failed to encode {path}: {source}")]
    Encode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

/// 8-bit grayscale raster, 0 = black ink, 255 = white paper.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, PreprocessError> {
        if width == 0 || height == 0 {
            return Err(PreprocessError::ZeroSized { width, height });
        }
        if pixels.len() != width * height {
            return Err(PreprocessError::BufferMismatch {
                len: pixels.len(),
                width,
                height,
                channels: 1,
            });
        }
        Ok(GrayImage { width, height, pixels })
    }
}

/// 1-bit raster, 1 = waveform foreground, 0 = background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl BinaryImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, PreprocessError> {
        if width == 0 || height == 0 {
            return Err(PreprocessError::ZeroSized { width, height });
        }
        if pixels.len() != width * height {
            return Err(PreprocessError::BufferMismatch {
                len: pixels.len(),
                width,
                height,
                channels: 1,
            });
        }
        debug_assert!(pixels.iter().all(|&p| p <= 1));
        Ok(BinaryImage { width, height, pixels })
    }

    pub fn foreground_count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p == 1).count()
    }

    /// Values as 0.0/1.0 floats, row-major, for model input.
    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64).collect()
    }
}

/// Rectangular region of interest, top-left `(x, y)` plus extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// Grid geometry used to split the waveform region into leads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeadGridSpec {
    pub rows: usize,
    pub cols: usize,
}

impl LeadGridSpec {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        if self.rows * self.cols != 12 {
            return Err(PreprocessError::BadGrid { rows: self.rows, cols: self.cols });
        }
        Ok(())
    }
}

impl Default for LeadGridSpec {
    /// Standard 12-lead report layout: 3 rows of 4 leads.
    fn default() -> Self {
        LeadGridSpec { rows: 3, cols: 4 }
    }
}

/// Global threshold; pixels strictly below it become foreground.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinarizeConfig {
    pub threshold: u8,
}

impl Default for BinarizeConfig {
    fn default() -> Self {
        BinarizeConfig { threshold: 40 }
    }
}

/// The twelve standard ECG leads, in conventional report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[allow(clippy::upper_case_acronyms)]
pub enum LeadLabel {
    I,
    II,
    III,
    AvR,
    AvL,
    AvF,
    V1,
    V2,
    V3,
    V4,
    V5,
    V6,
}

impl LeadLabel {
    pub const ALL: [LeadLabel; 12] = [
        LeadLabel::I,
        LeadLabel::II,
        LeadLabel::III,
        LeadLabel::AvR,
        LeadLabel::AvL,
        LeadLabel::AvF,
        LeadLabel::V1,
        LeadLabel::V2,
        LeadLabel::V3,
        LeadLabel::V4,
        LeadLabel::V5,
        LeadLabel::V6,
    ];
}

impl fmt::Display for LeadLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LeadLabel::I => "I",
            LeadLabel::II => "II",
            LeadLabel::III => "III",
            LeadLabel::AvR => "aVR",
            LeadLabel::AvL => "aVL",
            LeadLabel::AvF => "aVF",
            LeadLabel::V1 => "V1",
            LeadLabel::V2 => "V2",
            LeadLabel::V3 => "V3",
            LeadLabel::V4 => "V4",
            LeadLabel::V5 => "V5",
            LeadLabel::V6 => "V6",
        };
        f.write_str(s)
    }
}

impl FromStr for LeadLabel {
    type Err = PreprocessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LeadLabel::ALL
            .iter()
            .find(|l| l.to_string() == s)
            .copied()
            .ok_or_else(|| PreprocessError::UnknownLead(s.to_string()))
    }
}

/// One lead's binary waveform image, tagged with its source report.
#[derive(Debug, Clone)]
pub struct LeadImage {
    pub lead_label: LeadLabel,
    pub image: BinaryImage,
    pub source_report_id: String,
}

/// ITU-R 601 luminance: `round(0.299R + 0.587G + 0.114B)`.
pub fn to_grayscale(
    rgb: &[u8],
    width: usize,
    height: usize,
) -> Result<GrayImage, PreprocessError> {
    if width == 0 || height == 0 {
        return Err(PreprocessError::ZeroSized { width, height });
    }
    if rgb.len() != width * height * 3 {
        return Err(PreprocessError::BufferMismatch {
            len: rgb.len(),
            width,
            height,
            channels: 3,
        });
    }
    let pixels = rgb
        .chunks_exact(3)
        .map(|px| {
            let y = 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64;
            y.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    GrayImage::new(width, height, pixels)
}

/// Copy the `roi` window out of `img`; output pixel `(i, j)` equals input
/// pixel `(roi.x + i, roi.y + j)`.
pub fn crop_roi(img: &GrayImage, roi: &RoiRect) -> Result<GrayImage, PreprocessError> {
    if roi.w == 0 || roi.h == 0 {
        return Err(PreprocessError::ZeroSized { width: roi.w, height: roi.h });
    }
    if roi.x + roi.w > img.width || roi.y + roi.h > img.height {
        return Err(PreprocessError::RoiOutOfBounds {
            x: roi.x,
            y: roi.y,
            w: roi.w,
            h: roi.h,
            width: img.width,
            height: img.height,
        });
    }
    let mut pixels = Vec::with_capacity(roi.w * roi.h);
    for row in roi.y..roi.y + roi.h {
        let start = row * img.width + roi.x;
        pixels.extend_from_slice(&img.pixels[start..start + roi.w]);
    }
    GrayImage::new(roi.w, roi.h, pixels)
}

/// Global thresholding: a pixel becomes foreground iff its intensity is
/// strictly below the threshold, inverting polarity so dark ink maps to 1.
pub fn binarize(img: &GrayImage, cfg: &BinarizeConfig) -> BinaryImage {
    let pixels = img
        .pixels
        .iter()
        .map(|&p| u8::from(p < cfg.threshold))
        .collect();
    BinaryImage {
        width: img.width,
        height: img.height,
        pixels,
    }
}

/// Cut the waveform region into `rows × cols` equal cells (floor division;
/// rightmost/bottom remainder pixels are dropped) and pair each cell with a
/// lead label in row-major order.
pub fn split_leads(
    img: &BinaryImage,
    grid: &LeadGridSpec,
    labels: &[LeadLabel],
    report_id: &str,
) -> Result<Vec<LeadImage>, PreprocessError> {
    grid.validate()?;
    if labels.len() != 12 {
        return Err(PreprocessError::WrongLabelCount { expected: 12, got: labels.len() });
    }
    if img.width < grid.cols || img.height < grid.rows {
        return Err(PreprocessError::GridTooFine {
            width: img.width,
            height: img.height,
            rows: grid.rows,
            cols: grid.cols,
        });
    }
    let cell_w = img.width / grid.cols;
    let cell_h = img.height / grid.rows;
    let mut leads = Vec::with_capacity(12);
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let mut pixels = Vec::with_capacity(cell_w * cell_h);
            for row in 0..cell_h {
                let start = (r * cell_h + row) * img.width + c * cell_w;
                pixels.extend_from_slice(&img.pixels[start..start + cell_w]);
            }
            leads.push(LeadImage {
                lead_label: labels[r * grid.cols + c],
                image: BinaryImage::new(cell_w, cell_h, pixels)?,
                source_report_id: report_id.to_string(),
            });
        }
    }
    Ok(leads)
}

/// Nearest-neighbor resample to an `side × side` square:
/// `src_index = floor(dst_index · src_extent / side)`.
pub fn resize_nearest(img: &BinaryImage, side: usize) -> Result<BinaryImage, PreprocessError> {
    if side == 0 {
        return Err(PreprocessError::ZeroSized { width: side, height: side });
    }
    let mut pixels = Vec::with_capacity(side * side);
    for dy in 0..side {
        let sy = dy * img.height / side;
        for dx in 0..side {
            let sx = dx * img.width / side;
            pixels.push(img.pixels[sy * img.width + sx]);
        }
    }
    BinaryImage::new(side, side, pixels)
}

impl RoiRect {
    /// Whole-image region, used when no ROI is configured.
    pub fn full(width: usize, height: usize) -> Self {
        RoiRect { x: 0, y: 0, w: width, h: height }
    }
}

/// Full per-report pipeline: decode the scan, then
/// grayscale → crop → binarize → split → resize. `roi = None` keeps the
/// whole image.
pub fn preprocess_report(
    path: &Path,
    roi: Option<&RoiRect>,
    cfg: &BinarizeConfig,
    grid: &LeadGridSpec,
    resize: usize,
) -> Result<Vec<LeadImage>, PreprocessError> {
    let report_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let decoded = image::ImageReader::open(path)
        .map_err(|source| PreprocessError::Read { path: path.to_path_buf(), source })?
        .decode()
        .map_err(|source| PreprocessError::Decode { path: path.to_path_buf(), source })?
        .to_rgb8();
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let gray = to_grayscale(decoded.as_raw(), w, h)?;
    let full = RoiRect::full(w, h);
    let cropped = crop_roi(&gray, roi.unwrap_or(&full))?;
    let binary = binarize(&cropped, cfg);
    let leads = split_leads(&binary, grid, &LeadLabel::ALL, &report_id)?;
    leads
        .into_iter()
        .map(|lead| {
            Ok(LeadImage {
                image: resize_nearest(&lead.image, resize)?,
                ..lead
            })
        })
        .collect()
}

/// Write a binary image as an 8-bit grayscale PNG, foreground rendered
/// white on black.
pub fn save_binary_png(img: &BinaryImage, path: &Path) -> Result<(), PreprocessError> {
    let buf: Vec<u8> = img.pixels.iter().map(|&p| p * 255).collect();
    let out = image::GrayImage::from_raw(img.width as u32, img.height as u32, buf)
        .expect("buffer sized from image");
    out.save(path)
        .map_err(|source| PreprocessError::Encode { path: path.to_path_buf(), source })
}

/// Read a PNG written by [`save_binary_png`] back into a binary image.
pub fn load_binary_png(path: &Path) -> Result<BinaryImage, PreprocessError> {
    let decoded = image::ImageReader::open(path)
        .map_err(|source| PreprocessError::Read { path: path.to_path_buf(), source })?
        .decode()
        .map_err(|source| PreprocessError::Decode { path: path.to_path_buf(), source })?
        .to_luma8();
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let pixels = decoded.as_raw().iter().map(|&p| u8::from(p > 127)).collect();
    BinaryImage::new(w, h, pixels)
}
