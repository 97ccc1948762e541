//! Low-light degradation synthesis and CLAHE enhancement.
//!
//! The degradation model is global attenuation plus additive Gaussian noise,
//! clipped to `[0, 1]`. CLAHE inverts the contrast loss: the image is tiled,
//! each tile's histogram is clipped at a limit with the excess redistributed
//! uniformly, per-tile CDF mappings are built, and pixels are remapped by
//! bilinear interpolation between the four nearest tile-center mappings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};

/// Declared value domain of an [`ImageTensor`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueRange {
    /// Integer-valued samples in `{0..255}` (stored as floats).
    Byte,
    /// Real samples in `[0, 1]`.
    Unit,
}

/// Planar floating-point image of shape `(C, H, W)` with a declared range.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    range: ValueRange,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        range: ValueRange,
        data: Vec<f64>,
    ) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::invalid("image tensor: zero dimension"));
        }
        if data.len() != channels * height * width {
            return Err(Error::invalid(format!(
                "image tensor: data length {} does not match shape ({channels}, {height}, {width})",
                data.len()
            )));
        }
        let img = ImageTensor {
            channels,
            height,
            width,
            range,
            data,
        };
        img.check_range()?;
        Ok(img)
    }

    fn check_range(&self) -> Result<()> {
        let ok = match self.range {
            ValueRange::Byte => self
                .data
                .iter()
                .all(|&v| v.is_finite() && (0.0..=255.0).contains(&v) && v.fract() == 0.0),
            ValueRange::Unit => self.data.iter().all(|&v| v.is_finite() && (0.0..=1.0).contains(&v)),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(match self.range {
                ValueRange::Byte => "image tensor: values must be integers in 0..=255",
                ValueRange::Unit => "image tensor: values must lie in [0, 1]",
            }))
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// CLAHE parameters.
///
/// `clip_limit` is in the conventional normalized form: the per-tile absolute
/// clip count is `clip_limit * tile_pixels / gray_levels`, i.e. multiples of
/// the uniform bin height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClaheParams {
    /// Tiles per side (`M`), so the image is covered by an M-by-M tile grid.
    pub tile_grid: usize,
    /// Normalized clip limit kappa.
    pub clip_limit: f64,
    /// Number of gray levels; 256 for byte images.
    pub gray_levels: usize,
}

impl Default for ClaheParams {
    fn default() -> Self {
        ClaheParams {
            tile_grid: 8,
            clip_limit: 2.0,
            gray_levels: 256,
        }
    }
}

impl ClaheParams {
    pub fn validate(&self) -> Result<()> {
        if self.tile_grid < 1 {
            return Err(Error::invalid("clahe params: tile_grid must be >= 1"));
        }
        if !self.clip_limit.is_finite() || self.clip_limit <= 0.0 {
            return Err(Error::invalid("clahe params: clip_limit must be finite and > 0"));
        }
        if self.gray_levels < 2 || self.gray_levels > 256 {
            return Err(Error::invalid("clahe params: gray_levels must be in 2..=256"));
        }
        Ok(())
    }
}

/// Synthesize a low-light observation: `clip(gamma * clean + N, 0, 1)` with
/// zero-mean Gaussian noise of per-channel standard deviation `sigma`,
/// deterministic under `seed`.
pub fn degrade(clean: &ImageTensor, gamma: f64, sigma: f64, seed: u64) -> Result<ImageTensor> {
    if clean.range != ValueRange::Unit {
        return Err(Error::invalid("degrade: input must be in the unit range"));
    }
    if !gamma.is_finite() || gamma <= 0.0 || gamma > 1.0 {
        return Err(Error::invalid(format!("degrade: gamma must be in (0, 1], got {gamma}")));
    }
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::invalid("degrade: sigma must be finite and >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = if sigma == 0.0 {
        clean.data.iter().map(|&v| (gamma * v).clamp(0.0, 1.0)).collect()
    } else {
        let normal = Normal::new(0.0, sigma).expect("sigma validated");
        clean
            .data
            .iter()
            .map(|&v| (gamma * v + normal.sample(&mut rng)).clamp(0.0, 1.0))
            .collect()
    };
    ImageTensor::new(clean.channels, clean.height, clean.width, ValueRange::Unit, data)
}

/// Clip a histogram at `kappa_abs` and redistribute the excess uniformly:
/// `h'(v) = min(h(v), kappa) + excess / levels` for every bin.
///
/// Redistribution is single-pass, exactly as the clipped-histogram equation
/// states: bins may end up above `kappa_abs` after redistribution and no
/// re-clipping is performed. Total mass is preserved; the floating-point sum
/// is exact whenever `h.len()` is a power of two (256 and the test sizes).
pub fn clip_histogram(h: &[u64], kappa_abs: f64) -> Result<Vec<f64>> {
    if h.is_empty() {
        return Err(Error::invalid("clip_histogram: empty histogram"));
    }
    if !kappa_abs.is_finite() || kappa_abs <= 0.0 {
        return Err(Error::invalid("clip_histogram: kappa_abs must be > 0"));
    }
    let levels = h.len() as f64;
    let excess: f64 = h
        .iter()
        .map(|&c| (c as f64 - kappa_abs).max(0.0))
        .sum();
    let share = excess / levels;
    Ok(h.iter().map(|&c| (c as f64).min(kappa_abs) + share).collect())
}

/// Contrast-limited adaptive histogram equalization over integer images.
///
/// Each channel is processed independently. The image is tiled into an
/// `M x M` grid with tiles of `ceil(H/M) x ceil(W/M)` pixels and the last
/// row/column truncated; every tile must contain at least one pixel. Per
/// tile, the histogram is clipped (`kappa_abs = clip_limit * tile_pixels /
/// gray_levels`), the CDF is formed, and values map through
/// `round((gray_levels - 1) * cdf(v) / tile_pixels)`. Pixels are remapped by
/// bilinear interpolation of the four nearest tile-center mappings, clamped
/// (replicated) at the borders.
pub fn clahe(img: &ImageTensor, params: &ClaheParams) -> Result<ImageTensor> {
    params.validate()?;
    if img.range != ValueRange::Byte {
        return Err(Error::invalid("clahe: input must be byte-range"));
    }
    if img.data.iter().any(|&v| v >= params.gray_levels as f64) {
        return Err(Error::invalid(format!(
            "clahe: image contains values >= gray_levels ({})",
            params.gray_levels
        )));
    }
    let edges_y = tile_edges(img.height, params.tile_grid)?;
    let edges_x = tile_edges(img.width, params.tile_grid)?;
    let centers_y = tile_centers(&edges_y);
    let centers_x = tile_centers(&edges_x);
    let m = params.tile_grid;

    let mut out = Vec::with_capacity(img.data.len());
    for c in 0..img.channels {
        // Per-tile lookup tables, indexed [tile_y][tile_x][gray value].
        let mut luts: Vec<Vec<Vec<u8>>> = Vec::with_capacity(m);
        for rows in &edges_y {
            let mut row = Vec::with_capacity(m);
            for cols in &edges_x {
                row.push(tile_lut(img, c, rows, cols, params)?);
            }
            luts.push(row);
        }
        for y in 0..img.height {
            let (ty0, ty1, fy) = interp_coords(&centers_y, y as f64);
            for x in 0..img.width {
                let (tx0, tx1, fx) = interp_coords(&centers_x, x as f64);
                let v = img.get(c, y, x) as usize;
                let tl = luts[ty0][tx0][v] as f64;
                let tr = luts[ty0][tx1][v] as f64;
                let bl = luts[ty1][tx0][v] as f64;
                let br = luts[ty1][tx1][v] as f64;
                let top = (1.0 - fx) * tl + fx * tr;
                let bottom = (1.0 - fx) * bl + fx * br;
                let blended = (1.0 - fy) * top + fy * bottom;
                out.push(blended.round().clamp(0.0, (params.gray_levels - 1) as f64));
            }
        }
    }
    ImageTensor::new(img.channels, img.height, img.width, ValueRange::Byte, out)
}

/// Tile boundaries along one axis: `[start, end)` pairs.
fn tile_edges(extent: usize, m: usize) -> Result<Vec<(usize, usize)>> {
    let size = extent.div_ceil(m);
    let mut edges = Vec::with_capacity(m);
    for k in 0..m {
        let start = k * size;
        let end = ((k + 1) * size).min(extent);
        if start >= end {
            return Err(Error::invalid(format!(
                "clahe: tile {k} along an axis of extent {extent} is empty with a {m}-tile grid"
            )));
        }
        edges.push((start, end));
    }
    Ok(edges)
}

/// Pixel-coordinate center of each tile interval.
fn tile_centers(edges: &[(usize, usize)]) -> Vec<f64> {
    edges
        .iter()
        .map(|&(s, e)| (s + e - 1) as f64 / 2.0)
        .collect()
}

/// Neighboring tile indices and interpolation fraction for one coordinate,
/// clamped at the image borders.
fn interp_coords(centers: &[f64], coord: f64) -> (usize, usize, f64) {
    if coord <= centers[0] {
        return (0, 0, 0.0);
    }
    if coord >= centers[centers.len() - 1] {
        let last = centers.len() - 1;
        return (last, last, 0.0);
    }
    let hi = centers.partition_point(|&c| c <= coord);
    let lo = hi - 1;
    let f = (coord - centers[lo]) / (centers[hi] - centers[lo]);
    (lo, hi, f)
}

fn tile_lut(
    img: &ImageTensor,
    channel: usize,
    rows: &(usize, usize),
    cols: &(usize, usize),
    params: &ClaheParams,
) -> Result<Vec<u8>> {
    let mut hist = vec![0u64; params.gray_levels];
    for y in rows.0..rows.1 {
        for x in cols.0..cols.1 {
            hist[img.get(channel, y, x) as usize] += 1;
        }
    }
    let tile_pixels = ((rows.1 - rows.0) * (cols.1 - cols.0)) as f64;
    let kappa_abs = params.clip_limit * tile_pixels / params.gray_levels as f64;
    let clipped = clip_histogram(&hist, kappa_abs)?;
    let scale = (params.gray_levels - 1) as f64;
    let mut cdf = 0.0;
    Ok(clipped
        .iter()
        .map(|&hv| {
            cdf += hv;
            (scale * cdf / tile_pixels).round().clamp(0.0, scale) as u8
        })
        .collect())
}

/// Divide a byte-range image by 255 and zero-pad bottom/right so height and
/// width become the next multiples of 32. The original content occupies the
/// top-left region unchanged.
pub fn normalize_and_pad(img: &ImageTensor) -> Result<ImageTensor> {
    if img.range != ValueRange::Byte {
        return Err(Error::invalid("normalize_and_pad: input must be byte-range"));
    }
    let new_h = img.height.div_ceil(32) * 32;
    let new_w = img.width.div_ceil(32) * 32;
    let mut data = vec![0.0; img.channels * new_h * new_w];
    for c in 0..img.channels {
        for y in 0..img.height {
            for x in 0..img.width {
                data[(c * new_h + y) * new_w + x] = img.get(c, y, x) / 255.0;
            }
        }
    }
    ImageTensor::new(img.channels, new_h, new_w, ValueRange::Unit, data)
}

const EVIM_MAGIC: &[u8; 4] = b"EVIM";
const EVIM_VERSION: u32 = 1;

/// Encode an image in the `EVIM` binary format: magic, version, C, H, W as
/// little-endian u32, a range tag byte (0 = byte range, 1 = unit range),
/// then `C*H*W` little-endian f32 values.
pub fn write_image(img: &ImageTensor) -> Vec<u8> {
    let mut w = Writer::new(EVIM_MAGIC, EVIM_VERSION);
    w.u32(img.channels as u32);
    w.u32(img.height as u32);
    w.u32(img.width as u32);
    w.u8(match img.range {
        ValueRange::Byte => 0,
        ValueRange::Unit => 1,
    });
    w.f32_block(&img.data);
    w.into_bytes()
}

/// Decode an `EVIM` file, validating the declared range.
pub fn read_image(bytes: &[u8]) -> Result<ImageTensor> {
    let mut r = Reader::new(bytes);
    r.magic(EVIM_MAGIC)?;
    r.version(EVIM_VERSION)?;
    let channels = r.u32()? as usize;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let tag = r.u8()?;
    let range = match tag {
        0 => ValueRange::Byte,
        1 => ValueRange::Unit,
        other => return Err(Error::parse_byte(20, format!("unknown range tag {other}"))),
    };
    if channels == 0 || height == 0 || width == 0 {
        return Err(Error::parse_byte(8, "zero dimension"));
    }
    let count = channels
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .ok_or_else(|| Error::parse_byte(8, "shape overflows"))?;
    let data = r.f32_block(count, "image data")?;
    r.finish()?;
    ImageTensor::new(channels, height, width, range, data)
        .map_err(|e| Error::parse_byte(21, e.to_string()))
}
