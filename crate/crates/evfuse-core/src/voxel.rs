//! Temporal voxelization of event streams.
//!
//! A windowed event stream is converted to a dense `(2B, H, W)` grid: each
//! event's timestamp is normalized to `[0, B-1]` and its unit mass is split
//! between the two nearest temporal bins by a triangular kernel. The kernel
//! weights for one event always sum to 1, so the grid holds exactly one unit
//! of mass per event and per-polarity totals equal per-polarity event counts.
//! Accumulation is done in f64 so counts stay exact at realistic stream
//! sizes; the on-disk format stores f32 per the `EVXG` layout.

use crate::error::{Error, Result};
use crate::events::{restrict, EventStream, Polarity, TimeWindow};
use crate::codec::{Reader, Writer};

/// Dense polarity-split temporal voxel grid of shape `(2B, H, W)`.
///
/// Channel layout: index `q*B + b` where `q` is the polarity block
/// (negative = 0, positive = 1) and `b` the temporal bin. This ordering is
/// fixed so serialized grids are portable.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    bins: usize,
    width: usize,
    height: usize,
    data: Vec<f64>,
}

/// Parameters for voxelization and the density filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelParams {
    /// Temporal bins per polarity; must be at least 2.
    pub bins: usize,
    /// Minimum total event mass a `(b, q)` channel needs to survive the
    /// density filter.
    pub theta_dens: f64,
}

impl VoxelParams {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::invalid(format!(
                "voxel params: bins must be >= 2, got {}",
                self.bins
            )));
        }
        if !self.theta_dens.is_finite() || self.theta_dens < 0.0 {
            return Err(Error::invalid("voxel params: theta_dens must be finite and >= 0"));
        }
        Ok(())
    }
}

impl VoxelGrid {
    pub fn zeros(bins: usize, width: usize, height: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::invalid(format!("voxel grid: bins must be >= 2, got {bins}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::invalid("voxel grid: zero spatial extent"));
        }
        Ok(VoxelGrid {
            bins,
            width,
            height,
            data: vec![0.0; 2 * bins * height * width],
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        2 * self.bins
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn index(&self, channel: usize, y: usize, x: usize) -> usize {
        (channel * self.height + y) * self.width + x
    }

    /// Flat channel index for temporal bin `b` of polarity `q`.
    pub fn channel_of(&self, bin: usize, polarity: Polarity) -> usize {
        polarity.block() * self.bins + bin
    }

    pub fn get(&self, bin: usize, polarity: Polarity, x: usize, y: usize) -> f64 {
        self.data[self.index(self.channel_of(bin, polarity), y, x)]
    }

    /// Total mass in one `(b, q)` channel.
    pub fn channel_mass(&self, bin: usize, polarity: Polarity) -> f64 {
        let c = self.channel_of(bin, polarity);
        let plane = self.height * self.width;
        self.data[c * plane..(c + 1) * plane].iter().sum()
    }

    /// Total mass across all bins of one polarity.
    pub fn polarity_mass(&self, polarity: Polarity) -> f64 {
        (0..self.bins).map(|b| self.channel_mass(b, polarity)).sum()
    }

    /// Elementwise sum of two grids of identical shape.
    pub fn add(&self, other: &VoxelGrid) -> Result<VoxelGrid> {
        if (self.bins, self.width, self.height) != (other.bins, other.width, other.height) {
            return Err(Error::invalid("voxel grid shape mismatch in add"));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(VoxelGrid {
            bins: self.bins,
            width: self.width,
            height: self.height,
            data,
        })
    }
}

/// Normalized timestamp in `[0, B-1]` for an event at `t` inside `window`.
pub fn normalize_timestamp(t: u64, window: &TimeWindow, bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::invalid(format!("bins must be >= 2, got {bins}")));
    }
    if t < window.t0() || t > window.end() {
        return Err(Error::invalid(format!(
            "timestamp {t} outside window [{}, {}]",
            window.t0(),
            window.end()
        )));
    }
    Ok((t - window.t0()) as f64 / window.dt() as f64 * (bins - 1) as f64)
}

/// Triangular interpolation kernel: `max(0, 1 - |tau - b|)`.
pub fn kernel(tau: f64, bin: usize) -> f64 {
    (1.0 - (tau - bin as f64).abs()).max(0.0)
}

/// Finest temporal separation (in microseconds) the grid can represent:
/// `dt / (B - 1)`. Events closer than this always share a bin.
pub fn temporal_resolution(window: &TimeWindow, bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::invalid(format!("bins must be >= 2, got {bins}")));
    }
    Ok(window.dt() as f64 / (bins - 1) as f64)
}

/// Voxelize the events of `stream` that fall inside `window`.
///
/// The stream is restricted to the window internally, so callers may pass an
/// unwindowed stream. Each in-window event contributes `kernel(tau, b)` to
/// channel `(b, q)` at its pixel; because an event's kernel weights sum to 1,
/// per-polarity grid mass equals the per-polarity event count.
pub fn voxelize(stream: &EventStream, window: &TimeWindow, params: &VoxelParams) -> Result<VoxelGrid> {
    params.validate()?;
    let mut grid = VoxelGrid::zeros(
        params.bins,
        stream.sensor_width() as usize,
        stream.sensor_height() as usize,
    )?;
    let windowed = restrict(stream, window);
    for e in windowed.events() {
        let tau = normalize_timestamp(e.t, window, params.bins)?;
        let lower = tau.floor() as usize;
        for b in [lower, lower + 1] {
            if b >= params.bins {
                continue;
            }
            let w = kernel(tau, b);
            if w > 0.0 {
                let idx = grid.index(grid.channel_of(b, e.polarity), e.y as usize, e.x as usize);
                grid.data[idx] += w;
            }
        }
    }
    Ok(grid)
}

/// Zero every `(b, q)` channel whose total mass is strictly below
/// `theta_dens`. Channels are zeroed rather than removed so downstream
/// consumers always see a fixed `(2B, H, W)` shape. Returns the filtered
/// grid and the `(bin, polarity)` list of zeroed channels.
pub fn density_filter(grid: &VoxelGrid, theta_dens: f64) -> Result<(VoxelGrid, Vec<(usize, Polarity)>)> {
    if !theta_dens.is_finite() || theta_dens < 0.0 {
        return Err(Error::invalid("density filter: theta_dens must be finite and >= 0"));
    }
    let mut out = grid.clone();
    let mut zeroed = Vec::new();
    let plane = grid.height * grid.width;
    for polarity in [Polarity::Negative, Polarity::Positive] {
        for bin in 0..grid.bins {
            if grid.channel_mass(bin, polarity) < theta_dens {
                let c = grid.channel_of(bin, polarity);
                out.data[c * plane..(c + 1) * plane].fill(0.0);
                zeroed.push((bin, polarity));
            }
        }
    }
    Ok((out, zeroed))
}

const EVXG_MAGIC: &[u8; 4] = b"EVXG";
const EVXG_VERSION: u32 = 1;

/// Encode a grid in the `EVXG` binary format: magic, version, then B, H, W
/// as little-endian u32 and `2B*H*W` little-endian f32 values in
/// (channel, row, column) order.
pub fn write_voxel_grid(grid: &VoxelGrid) -> Vec<u8> {
    let mut w = Writer::new(EVXG_MAGIC, EVXG_VERSION);
    w.u32(grid.bins as u32);
    w.u32(grid.height as u32);
    w.u32(grid.width as u32);
    w.f32_block(&grid.data);
    w.into_bytes()
}

/// Decode an `EVXG` file. Entries must be finite and non-negative; input
/// length must match the declared shape exactly.
pub fn read_voxel_grid(bytes: &[u8]) -> Result<VoxelGrid> {
    let mut r = Reader::new(bytes);
    r.magic(EVXG_MAGIC)?;
    r.version(EVXG_VERSION)?;
    let bins = r.u32()? as usize;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    if bins < 2 {
        return Err(Error::parse_byte(8, format!("bins must be >= 2, got {bins}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::parse_byte(12, "zero spatial extent"));
    }
    let count = 2usize
        .checked_mul(bins)
        .and_then(|v| v.checked_mul(height))
        .and_then(|v| v.checked_mul(width))
        .ok_or_else(|| Error::parse_byte(8, "shape overflows"))?;
    let data = r.f32_block(count, "voxel data")?;
    r.finish()?;
    if let Some(bad) = data.iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::parse_byte(
            20 + 4 * bad,
            "voxel entries must be finite and non-negative",
        ));
    }
    Ok(VoxelGrid {
        bins,
        width,
        height,
        data,
    })
}
