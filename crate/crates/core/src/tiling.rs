//! Deterministic tile extraction: one WSI in, the ordered sequence of
//! 256×256 tiles at the target resolution out, tiles with too little tissue
//! dropped.
//!
//! The grid is defined on the source level and each tile is resampled
//! independently, so memory stays bounded by one tile regardless of slide
//! size. Workers may decode tiles in parallel but results are always emitted
//! in ascending index order; stream and precache modes yield pixel-identical
//! sequences.

use crate::dicom::{read_frame, CodecRegistry, DataSet, DicomError, WsiInstanceInfo};
use crate::digest::{sha256_hex, sha256_hex_short};
use crate::storage::{CachedTile, StorageError, TileCache, TileCacheKey};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::Mutex;
use thiserror::Error;

/// Tiling parameters. Defaults: 256 px tiles at 1 µm/px, tiles with less
/// than 50% tissue discarded, background = all channels ≥ 220.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TilingParams {
    pub tile_px: u32,
    pub target_spacing_um: f64,
    pub tissue_threshold: f64,
    pub background_rgb_min: u8,
}

impl Default for TilingParams {
    fn default() -> Self {
        Self {
            tile_px: 256,
            target_spacing_um: 1.0,
            tissue_threshold: 0.5,
            background_rgb_min: 220,
        }
    }
}

impl TilingParams {
    pub fn validate(&self) -> Result<(), TilingError> {
        if self.tile_px == 0 {
            return Err(TilingError::InvalidParams("tile_px must be > 0".into()));
        }
        if !(self.tissue_threshold > 0.0 && self.tissue_threshold <= 1.0) {
            return Err(TilingError::InvalidParams(
                "tissue_threshold must be in (0, 1]".into(),
            ));
        }
        if !(self.target_spacing_um.is_finite() && self.target_spacing_um > 0.0) {
            return Err(TilingError::InvalidParams(
                "target_spacing_um must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Digest over every parameter that influences tile pixels or selection;
    /// keys of the tile cache include it so entries cannot outlive a
    /// parameter change.
    pub fn params_digest(&self) -> String {
        let canonical = format!(
            "tile_px={};target_spacing_um={};tissue_threshold={};background_rgb_min={}",
            self.tile_px,
            crate::canon::fmt_f64_exact(self.target_spacing_um),
            crate::canon::fmt_f64_exact(self.tissue_threshold),
            self.background_rgb_min
        );
        sha256_hex_short(canonical.as_bytes())
    }
}

/// The tile grid induced on a source pyramid level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TileGrid {
    /// Side length of one tile in source pixels.
    pub source_tile_px: u32,
    pub tiles_x: u32,
    pub tiles_y: u32,
    /// Source pixels per target pixel.
    pub scale: f64,
}

impl TileGrid {
    pub fn tile_count(&self) -> u32 {
        self.tiles_x * self.tiles_y
    }
}

/// One resampled RGB tile.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileImage {
    /// Row-major index over the full grid (kept and discarded tiles alike).
    pub index: u32,
    pub col: u32,
    pub row: u32,
    pub tile_px: u32,
    pub pixels: Vec<u8>,
}

/// Per-grid-tile bookkeeping emitted alongside the kept tiles.
#[derive(Debug, Clone, PartialEq)]
pub struct TileRecord {
    pub index: u32,
    pub col: u32,
    pub row: u32,
    pub kept: bool,
    pub tissue_fraction: f64,
    /// SHA-256 of the resampled tile pixels.
    pub pixel_digest: String,
}

/// Output of [`iterate_tiles`]: kept tiles in ascending index order plus a
/// record for every grid tile.
#[derive(Debug, Clone, PartialEq)]
pub struct TileSequence {
    pub tiles: Vec<TileImage>,
    pub records: Vec<TileRecord>,
}

impl TileSequence {
    pub fn kept_indices(&self) -> Vec<u32> {
        self.tiles.iter().map(|t| t.index).collect()
    }

    /// Tile manifest lines: index, kept flag, tissue fraction (6 decimals),
    /// pixel digest.
    pub fn manifest_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{:.6}\t{}\n",
                r.index,
                if r.kept { "kept" } else { "discarded" },
                r.tissue_fraction,
                r.pixel_digest
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TilingMode {
    Stream,
    Precache,
}

#[derive(Debug, Error)]
pub enum TilingError {
    #[error("series has no VOLUME-flavor instance")]
    NoVolumeInstance,
    #[error(
        "source spacing {source_um} µm/px too far from target {target_um} µm/px (limit: factor 4)"
    )]
    ResampleTooExtreme { source_um: f64, target_um: f64 },
    #[error("degenerate slide: tile grid is {tiles_x}x{tiles_y}")]
    DegenerateSlide { tiles_x: u32, tiles_y: u32 },
    #[error("empty pixel buffer")]
    EmptyBuffer,
    #[error("resample source is not a square buffer of the declared size")]
    NonSquareSource,
    #[error("invalid tiling parameters: {0}")]
    InvalidParams(String),
    #[error("tile {index}: {source}")]
    AtTile {
        index: u32,
        #[source]
        source: Box<TilingError>,
    },
    #[error(transparent)]
    Dicom(#[from] DicomError),
    #[error(transparent)]
    Storage(#[from] StorageError),
}

impl TilingError {
    fn at_tile(self, index: u32) -> TilingError {
        TilingError::AtTile {
            index,
            source: Box::new(self),
        }
    }
}

/// Picks the pyramid level whose spacing is closest to the target on a log
/// scale: the instance minimizing `|ln(spacing/target)|`, ties broken toward
/// finer spacing, then lexicographically smallest SOP instance UID.
///
/// Comparison uses `max(r, 1/r)` of the ratio, which is strictly monotone in
/// `|ln r|` and avoids logarithm rounding where the tie matters.
pub fn select_level(
    instances: &[WsiInstanceInfo],
    target_spacing_um: f64,
) -> Result<&WsiInstanceInfo, TilingError> {
    use crate::dicom::ImageFlavor;
    instances
        .iter()
        .filter(|i| i.image_type_flavor == ImageFlavor::Volume)
        .min_by(|a, b| {
            let key = |i: &WsiInstanceInfo| {
                let r = i.spacing_um() / target_spacing_um;
                r.max(1.0 / r)
            };
            key(a)
                .total_cmp(&key(b))
                .then_with(|| a.spacing_um().total_cmp(&b.spacing_um()))
                .then_with(|| a.sop_instance_uid.cmp(&b.sop_instance_uid))
        })
        .ok_or(TilingError::NoVolumeInstance)
}

/// Computes the tile grid for one level. Partial edge tiles are dropped
/// (floor division), keeping every tile exactly `source_tile_px` square.
pub fn compute_grid(
    info: &WsiInstanceInfo,
    params: &TilingParams,
) -> Result<TileGrid, TilingError> {
    params.validate()?;
    let source_um = info.spacing_um();
    let scale = params.target_spacing_um / source_um;
    if !(0.25..=4.0).contains(&scale) {
        return Err(TilingError::ResampleTooExtreme {
            source_um,
            target_um: params.target_spacing_um,
        });
    }
    let source_tile_px = (f64::from(params.tile_px) * scale).round() as u32;
    if source_tile_px == 0 {
        return Err(TilingError::InvalidParams(
            "source tile size rounds to zero".into(),
        ));
    }
    let tiles_x = info.total_pixel_matrix_columns / source_tile_px;
    let tiles_y = info.total_pixel_matrix_rows / source_tile_px;
    if tiles_x == 0 || tiles_y == 0 {
        return Err(TilingError::DegenerateSlide { tiles_x, tiles_y });
    }
    Ok(TileGrid {
        source_tile_px,
        tiles_x,
        tiles_y,
        scale,
    })
}

/// Fraction of pixels that are not background, where background means all
/// three channels at or above `background_rgb_min`.
pub fn tissue_fraction(pixels: &[u8], params: &TilingParams) -> Result<f64, TilingError> {
    if pixels.is_empty() {
        return Err(TilingError::EmptyBuffer);
    }
    debug_assert!(
        pixels.len().is_multiple_of(3),
        "RGB buffer length not a multiple of 3"
    );
    let min = params.background_rgb_min;
    let total = pixels.len() / 3;
    let tissue = pixels
        .chunks_exact(3)
        .filter(|px| !(px[0] >= min && px[1] >= min && px[2] >= min))
        .count();
    Ok(tissue as f64 / total as f64)
}

/// Resamples a square source buffer to `tile_px`: exact area-averaged box
/// filter when shrinking, bilinear interpolation when growing, identity when
/// equal. Values round half away from zero.
pub fn resample_tile(source: &[u8], source_px: u32, tile_px: u32) -> Result<Vec<u8>, TilingError> {
    if source_px == 0 || source.len() != (source_px as usize).pow(2) * 3 {
        return Err(TilingError::NonSquareSource);
    }
    if source_px == tile_px {
        return Ok(source.to_vec());
    }
    if source_px > tile_px {
        Ok(box_downsample(source, source_px as usize, tile_px as usize))
    } else {
        Ok(bilinear_upsample(
            source,
            source_px as usize,
            tile_px as usize,
        ))
    }
}

/// Exact area-weighted box filter; handles fractional ratios.
fn box_downsample(source: &[u8], src: usize, dst: usize) -> Vec<u8> {
    let ratio = src as f64 / dst as f64;
    let area = ratio * ratio;
    let mut out = Vec::with_capacity(dst * dst * 3);
    // Per-axis overlap weights are the same for x and y; precompute spans.
    let spans: Vec<(usize, Vec<f64>)> = (0..dst)
        .map(|d| {
            let lo = d as f64 * ratio;
            let hi = (d + 1) as f64 * ratio;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            let weights = (first..last)
                .map(|c| {
                    let cell_lo = c as f64;
                    let cell_hi = cell_lo + 1.0;
                    (hi.min(cell_hi) - lo.max(cell_lo)).max(0.0)
                })
                .collect();
            (first, weights)
        })
        .collect();

    for (y_first, y_weights) in &spans {
        for (x_first, x_weights) in &spans {
            let mut acc = [0.0f64; 3];
            for (dy, wy) in y_weights.iter().enumerate() {
                let sy = y_first + dy;
                for (dx, wx) in x_weights.iter().enumerate() {
                    let sx = x_first + dx;
                    let w = wy * wx;
                    let base = (sy * src + sx) * 3;
                    acc[0] += w * f64::from(source[base]);
                    acc[1] += w * f64::from(source[base + 1]);
                    acc[2] += w * f64::from(source[base + 2]);
                }
            }
            for channel in acc {
                out.push(clamp_u8((channel / area).round()));
            }
        }
    }
    out
}

/// Center-aligned bilinear interpolation with edge clamping.
fn bilinear_upsample(source: &[u8], src: usize, dst: usize) -> Vec<u8> {
    let ratio = src as f64 / dst as f64;
    let mut out = Vec::with_capacity(dst * dst * 3);
    let coords: Vec<(usize, usize, f64)> = (0..dst)
        .map(|d| {
            let pos = ((d as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect();

    for (y0, y1, fy) in &coords {
        for (x0, x1, fx) in &coords {
            for channel in 0..3 {
                let p = |y: usize, x: usize| f64::from(source[(y * src + x) * 3 + channel]);
                let top = p(*y0, *x0) * (1.0 - fx) + p(*y0, *x1) * fx;
                let bottom = p(*y1, *x0) * (1.0 - fx) + p(*y1, *x1) * fx;
                out.push(clamp_u8((top * (1.0 - fy) + bottom * fy).round()));
            }
        }
    }
    out
}

fn clamp_u8(v: f64) -> u8 {
    v.clamp(0.0, 255.0) as u8
}

/// Assembles the source-resolution pixels for one grid tile, decoding only
/// the frames the tile touches.
fn extract_source_tile(
    ds: &DataSet,
    info: &WsiInstanceInfo,
    grid: &TileGrid,
    col: u32,
    row: u32,
    codecs: &CodecRegistry,
) -> Result<Vec<u8>, TilingError> {
    let side = grid.source_tile_px as usize;
    let x0 = (col * grid.source_tile_px) as usize;
    let y0 = (row * grid.source_tile_px) as usize;
    let frame_w = usize::from(info.frame_columns);
    let frame_h = usize::from(info.frame_rows);
    let frames_per_row = info.tiles_per_row() as usize;

    let mut pixels = vec![0u8; side * side * 3];
    let mut decoded: HashMap<usize, crate::dicom::FrameImage> = HashMap::new();

    let fx0 = x0 / frame_w;
    let fx1 = (x0 + side - 1) / frame_w;
    let fy0 = y0 / frame_h;
    let fy1 = (y0 + side - 1) / frame_h;
    for fy in fy0..=fy1 {
        for fx in fx0..=fx1 {
            let frame_index = fy * frames_per_row + fx;
            let frame = match decoded.entry(frame_index) {
                std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(read_frame(ds, info, frame_index as u32, codecs)?)
                }
            };
            // Overlap of this frame with the tile rect, in global coords.
            let gx0 = (fx * frame_w).max(x0);
            let gx1 = ((fx + 1) * frame_w).min(x0 + side);
            let gy0 = (fy * frame_h).max(y0);
            let gy1 = ((fy + 1) * frame_h).min(y0 + side);
            for gy in gy0..gy1 {
                let src_off = ((gy - fy * frame_h) * frame_w + (gx0 - fx * frame_w)) * 3;
                let dst_off = ((gy - y0) * side + (gx0 - x0)) * 3;
                let len = (gx1 - gx0) * 3;
                pixels[dst_off..dst_off + len]
                    .copy_from_slice(&frame.pixels[src_off..src_off + len]);
            }
        }
    }
    Ok(pixels)
}

fn compute_tile(
    ds: &DataSet,
    info: &WsiInstanceInfo,
    grid: &TileGrid,
    params: &TilingParams,
    index: u32,
    codecs: &CodecRegistry,
) -> Result<(TileRecord, TileImage), TilingError> {
    let col = index % grid.tiles_x;
    let row = index / grid.tiles_x;
    let source = extract_source_tile(ds, info, grid, col, row, codecs)?;
    let resampled = resample_tile(&source, grid.source_tile_px, params.tile_px)?;
    let fraction = tissue_fraction(&resampled, params)?;
    // Strictly-below-threshold tiles are discarded; a fraction exactly at
    // the threshold is kept.
    let kept = fraction >= params.tissue_threshold;
    let record = TileRecord {
        index,
        col,
        row,
        kept,
        tissue_fraction: fraction,
        pixel_digest: sha256_hex(&resampled),
    };
    let tile = TileImage {
        index,
        col,
        row,
        tile_px: params.tile_px,
        pixels: resampled,
    };
    Ok((record, tile))
}

/// Runs the tile pipeline over one slide.
///
/// Yields kept tiles (tissue fraction ≥ threshold) strictly in ascending
/// index order together with a record for every grid tile. `threads > 1`
/// decodes tiles in a bounded worker pool; output order and content are
/// identical for any thread count. Precache mode writes kept tiles through
/// the PNG cache and serves the returned pixels from it.
pub fn iterate_tiles(
    ds: &DataSet,
    info: &WsiInstanceInfo,
    params: &TilingParams,
    mode: TilingMode,
    cache: Option<&TileCache>,
    codecs: &CodecRegistry,
    threads: usize,
) -> Result<TileSequence, TilingError> {
    let grid = compute_grid(info, params)?;
    let cache = match (mode, cache) {
        (TilingMode::Precache, None) => {
            return Err(TilingError::InvalidParams(
                "precache mode requires a configured cache".into(),
            ))
        }
        (TilingMode::Precache, Some(c)) => Some(c),
        (TilingMode::Stream, _) => None,
    };
    let threads = threads.max(1);
    let total = grid.tile_count();

    type TileSlot = Option<Result<(TileRecord, TileImage), TilingError>>;
    let mut computed: Vec<(TileRecord, TileImage)> = Vec::with_capacity(total as usize);
    if threads == 1 {
        for index in 0..total {
            let pair = compute_tile(ds, info, &grid, params, index, codecs)
                .map_err(|e| e.at_tile(index))?;
            computed.push(pair);
        }
    } else {
        let results: Mutex<Vec<TileSlot>> = Mutex::new((0..total).map(|_| None).collect());
        let next = std::sync::atomic::AtomicU32::new(0);
        std::thread::scope(|scope| {
            for _ in 0..threads {
                scope.spawn(|| loop {
                    let index = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if index >= total {
                        break;
                    }
                    let outcome = compute_tile(ds, info, &grid, params, index, codecs)
                        .map_err(|e| e.at_tile(index));
                    results.lock().unwrap()[index as usize] = Some(outcome);
                });
            }
        });
        for slot in results.into_inner().unwrap() {
            computed.push(slot.expect("worker pool left a tile unprocessed")?);
        }
    }

    let mut records = Vec::with_capacity(total as usize);
    let mut tiles = Vec::new();
    for (record, tile) in computed {
        if record.kept {
            let tile = match cache {
                None => tile,
                Some(cache) => {
                    let key = TileCacheKey {
                        sop_instance_uid: info.sop_instance_uid.clone(),
                        tile_index: record.index,
                        params_digest: params.params_digest(),
                    };
                    cache
                        .put(
                            &key,
                            &CachedTile {
                                width: params.tile_px,
                                height: params.tile_px,
                                pixels: tile.pixels.clone(),
                            },
                        )
                        .map_err(|e| TilingError::from(e).at_tile(record.index))?;
                    // Serve from the cache; a concurrently evicted or
                    // mis-sized entry falls back to the freshly computed
                    // pixels.
                    match cache
                        .get(&key)
                        .map_err(|e| TilingError::from(e).at_tile(record.index))?
                    {
                        Some(cached)
                            if cached.width == params.tile_px
                                && cached.height == params.tile_px =>
                        {
                            TileImage {
                                pixels: cached.pixels,
                                ..tile
                            }
                        }
                        _ => tile,
                    }
                }
            };
            tiles.push(tile);
        }
        records.push(record);
    }
    Ok(TileSequence { tiles, records })
}
