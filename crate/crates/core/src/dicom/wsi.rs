//! Slide Microscopy metadata extraction and per-frame pixel access.

use super::{tags, DataSet, DicomError, Result, Tag, Value};
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

/// Value 3 of ImageType for SM instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ImageFlavor {
    Volume,
    Label,
    Overview,
    Thumbnail,
}

impl FromStr for ImageFlavor {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "VOLUME" => Ok(ImageFlavor::Volume),
            "LABEL" => Ok(ImageFlavor::Label),
            "OVERVIEW" => Ok(ImageFlavor::Overview),
            "THUMBNAIL" => Ok(ImageFlavor::Thumbnail),
            other => Err(format!("unknown image flavor {other:?}")),
        }
    }
}

impl fmt::Display for ImageFlavor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ImageFlavor::Volume => "VOLUME",
            ImageFlavor::Label => "LABEL",
            ImageFlavor::Overview => "OVERVIEW",
            ImageFlavor::Thumbnail => "THUMBNAIL",
        })
    }
}

/// The Slide Microscopy attributes the tiling pipeline needs.
#[derive(Debug, Clone, PartialEq)]
pub struct WsiInstanceInfo {
    pub sop_instance_uid: String,
    pub series_instance_uid: String,
    pub patient_id: String,
    pub modality: String,
    pub image_type_flavor: ImageFlavor,
    pub total_pixel_matrix_columns: u32,
    pub total_pixel_matrix_rows: u32,
    pub frame_columns: u16,
    pub frame_rows: u16,
    pub number_of_frames: u32,
    /// (row, column) spacing in mm per pixel.
    pub pixel_spacing_mm: (f64, f64),
    pub photometric_interpretation: String,
    pub dimension_organization: String,
}

impl WsiInstanceInfo {
    pub fn tiles_per_row(&self) -> u32 {
        self.total_pixel_matrix_columns
            .div_ceil(u32::from(self.frame_columns))
    }

    pub fn tiles_per_col(&self) -> u32 {
        self.total_pixel_matrix_rows
            .div_ceil(u32::from(self.frame_rows))
    }

    /// Row pixel spacing in µm per pixel (fixtures and IDC SM data use
    /// square pixels; the row component is authoritative here).
    pub fn spacing_um(&self) -> f64 {
        self.pixel_spacing_mm.0 * 1000.0
    }
}

fn required(ds: &DataSet, tag: Tag) -> Result<&super::DataElement> {
    ds.element(tag).ok_or(DicomError::MissingAttribute(tag))
}

fn required_string(ds: &DataSet, tag: Tag) -> Result<String> {
    required(ds, tag)?
        .string()
        .ok_or(DicomError::MissingAttribute(tag))
}

fn required_u16(ds: &DataSet, tag: Tag) -> Result<u16> {
    required(ds, tag)?;
    ds.u16_value(tag)
        .ok_or_else(|| DicomError::MalformedAttribute {
            tag,
            detail: "expected a 2-byte unsigned value".into(),
        })
}

fn required_u32(ds: &DataSet, tag: Tag) -> Result<u32> {
    required(ds, tag)?;
    ds.u32_value(tag)
        .ok_or_else(|| DicomError::MalformedAttribute {
            tag,
            detail: "expected a 4-byte unsigned value".into(),
        })
}

fn parse_is_u32(ds: &DataSet, tag: Tag) -> Result<u32> {
    let raw = required_string(ds, tag)?;
    raw.trim()
        .parse()
        .map_err(|_| DicomError::MalformedAttribute {
            tag,
            detail: format!("integer string expected, got {raw:?}"),
        })
}

/// Pixel spacing from SharedFunctionalGroups → PixelMeasures → PixelSpacing.
fn pixel_spacing(ds: &DataSet) -> Result<(f64, f64)> {
    let shared = required(ds, tags::SHARED_FUNCTIONAL_GROUPS)?;
    let items = shared
        .items()
        .ok_or(DicomError::MissingAttribute(tags::SHARED_FUNCTIONAL_GROUPS))?;
    let first = items
        .first()
        .ok_or(DicomError::MissingAttribute(tags::PIXEL_MEASURES_SEQUENCE))?;
    let measures = first
        .iter()
        .find(|e| e.tag == tags::PIXEL_MEASURES_SEQUENCE)
        .and_then(|e| e.items())
        .and_then(|items| items.first())
        .ok_or(DicomError::MissingAttribute(tags::PIXEL_MEASURES_SEQUENCE))?;
    let spacing_el = measures
        .iter()
        .find(|e| e.tag == tags::PIXEL_SPACING)
        .ok_or(DicomError::MissingAttribute(tags::PIXEL_SPACING))?;
    let raw = spacing_el
        .string()
        .ok_or(DicomError::MissingAttribute(tags::PIXEL_SPACING))?;
    let malformed = |detail: String| DicomError::MalformedAttribute {
        tag: tags::PIXEL_SPACING,
        detail,
    };
    let mut parts = raw.split('\\');
    let row: f64 = parts
        .next()
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| malformed(format!("bad spacing {raw:?}")))?;
    let col: f64 = parts
        .next()
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| malformed(format!("bad spacing {raw:?}")))?;
    if !(row.is_finite() && col.is_finite() && row > 0.0 && col > 0.0) {
        return Err(malformed(format!("non-positive spacing {raw:?}")));
    }
    Ok((row, col))
}

/// Extracts the whole-slide attributes from a parsed SM instance.
pub fn extract_wsi_info(ds: &DataSet) -> Result<WsiInstanceInfo> {
    let sop_class = required_string(ds, tags::SOP_CLASS_UID)?;
    if sop_class != super::SOP_CLASS_WSI {
        return Err(DicomError::NotSlideMicroscopy(format!(
            "SOP class {sop_class} is not VL Whole Slide Microscopy Image Storage"
        )));
    }
    let modality = required_string(ds, tags::MODALITY)?;
    if modality != "SM" {
        return Err(DicomError::NotSlideMicroscopy(format!(
            "modality {modality:?} (expected \"SM\")"
        )));
    }

    let image_type = required_string(ds, tags::IMAGE_TYPE)?;
    let flavor_raw = image_type.split('\\').nth(2).unwrap_or("");
    let image_type_flavor =
        flavor_raw
            .parse::<ImageFlavor>()
            .map_err(|detail| DicomError::MalformedAttribute {
                tag: tags::IMAGE_TYPE,
                detail,
            })?;

    let dimension_organization = required_string(ds, tags::DIMENSION_ORGANIZATION_TYPE)?;
    if dimension_organization != "TILED_FULL" {
        return Err(DicomError::UnsupportedOrganization(dimension_organization));
    }

    let info = WsiInstanceInfo {
        sop_instance_uid: required_string(ds, tags::SOP_INSTANCE_UID)?,
        series_instance_uid: required_string(ds, tags::SERIES_INSTANCE_UID)?,
        patient_id: required_string(ds, tags::PATIENT_ID)?,
        modality,
        image_type_flavor,
        total_pixel_matrix_columns: required_u32(ds, tags::TOTAL_PIXEL_MATRIX_COLUMNS)?,
        total_pixel_matrix_rows: required_u32(ds, tags::TOTAL_PIXEL_MATRIX_ROWS)?,
        frame_columns: required_u16(ds, tags::COLUMNS)?,
        frame_rows: required_u16(ds, tags::ROWS)?,
        number_of_frames: parse_is_u32(ds, tags::NUMBER_OF_FRAMES)?,
        pixel_spacing_mm: pixel_spacing(ds)?,
        photometric_interpretation: required_string(ds, tags::PHOTOMETRIC_INTERPRETATION)?,
        dimension_organization,
    };

    // TILED_FULL with a single focal plane tiles the matrix exactly; any
    // other frame count implies an organization this pipeline cannot index.
    let expected = info.tiles_per_row() * info.tiles_per_col();
    if info.number_of_frames != expected {
        return Err(DicomError::UnsupportedOrganization(format!(
            "TILED_FULL with {} frames but a {}x{} grid expects {expected} (multiple focal planes?)",
            info.number_of_frames,
            info.tiles_per_row(),
            info.tiles_per_col(),
        )));
    }
    Ok(info)
}

/// Row-major frame index for a TILED_FULL tile coordinate.
pub fn frame_for_tile(info: &WsiInstanceInfo, tile_col: u32, tile_row: u32) -> Result<u32> {
    let tiles_x = info.tiles_per_row();
    let tiles_y = info.tiles_per_col();
    if tile_col >= tiles_x || tile_row >= tiles_y {
        return Err(DicomError::OutOfGrid {
            col: tile_col,
            row: tile_row,
            tiles_x,
            tiles_y,
        });
    }
    Ok(tile_row * tiles_x + tile_col)
}

/// One decoded RGB frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameImage {
    pub width: u16,
    pub height: u16,
    /// Row-major interleaved RGB, exactly `width * height * 3` bytes.
    pub pixels: Vec<u8>,
}

/// Decoder for one encapsulated transfer syntax. Implementations must be
/// stateless or internally synchronized.
pub trait FrameCodec: Send + Sync {
    /// Decodes one frame's fragment bytes to interleaved RGB.
    fn decode(&self, data: &[u8], width: u16, height: u16) -> std::result::Result<Vec<u8>, String>;
}

/// Transfer syntax → codec mapping. Empty by default; native pixel data
/// needs no codec.
#[derive(Default, Clone)]
pub struct CodecRegistry {
    codecs: HashMap<String, Arc<dyn FrameCodec>>,
}

impl CodecRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, transfer_syntax: &str, codec: Arc<dyn FrameCodec>) {
        self.codecs.insert(transfer_syntax.to_string(), codec);
    }

    pub fn get(&self, transfer_syntax: &str) -> Option<&Arc<dyn FrameCodec>> {
        self.codecs.get(transfer_syntax)
    }
}

impl fmt::Debug for CodecRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CodecRegistry")
            .field("transfer_syntaxes", &self.codecs.keys().collect::<Vec<_>>())
            .finish()
    }
}

/// Decodes one frame: native pixel data is sliced by fixed stride,
/// encapsulated data is mapped to its fragments and handed to the codec
/// registered for the dataset's transfer syntax.
pub fn read_frame(
    ds: &DataSet,
    info: &WsiInstanceInfo,
    frame_index: u32,
    codecs: &CodecRegistry,
) -> Result<FrameImage> {
    if frame_index >= info.number_of_frames {
        return Err(DicomError::FrameOutOfRange {
            frame: frame_index,
            count: info.number_of_frames,
        });
    }
    let element = required(ds, tags::PIXEL_DATA)?;
    let width = info.frame_columns;
    let height = info.frame_rows;
    let frame_len = usize::from(width) * usize::from(height) * 3;

    match &element.value {
        Value::Bytes(bytes) => {
            let start = frame_index as usize * frame_len;
            let end = start + frame_len;
            if end > bytes.len() {
                return Err(DicomError::DecodeFailure {
                    frame: frame_index,
                    offset: bytes.len(),
                    detail: format!(
                        "native pixel data holds {} bytes, frame needs {start}..{end}",
                        bytes.len()
                    ),
                });
            }
            Ok(FrameImage {
                width,
                height,
                pixels: bytes[start..end].to_vec(),
            })
        }
        Value::Fragments {
            offset_table,
            fragments,
        } => {
            let codec = codecs
                .get(&ds.transfer_syntax)
                .ok_or_else(|| DicomError::CodecUnavailable(ds.transfer_syntax.clone()))?;
            let data =
                frame_fragment_bytes(offset_table, fragments, frame_index, info.number_of_frames)?;
            let pixels =
                codec
                    .decode(&data, width, height)
                    .map_err(|detail| DicomError::DecodeFailure {
                        frame: frame_index,
                        offset: 0,
                        detail,
                    })?;
            if pixels.len() != frame_len {
                return Err(DicomError::DecodeFailure {
                    frame: frame_index,
                    offset: pixels.len(),
                    detail: format!(
                        "codec returned {} bytes, expected {frame_len}",
                        pixels.len()
                    ),
                });
            }
            Ok(FrameImage {
                width,
                height,
                pixels,
            })
        }
        Value::Sequence(_) => Err(DicomError::MalformedAttribute {
            tag: tags::PIXEL_DATA,
            detail: "pixel data stored as a sequence".into(),
        }),
    }
}

/// Concatenated fragment bytes for one frame.
///
/// With a Basic Offset Table, entry `k` is the byte offset of frame `k`'s
/// first fragment item (tag + length headers included), measured from the
/// byte after the table. Without one, the mapping is reconstructible only
/// when fragments and frames correspond one to one.
fn frame_fragment_bytes(
    offset_table: &[u32],
    fragments: &[Vec<u8>],
    frame_index: u32,
    number_of_frames: u32,
) -> Result<Vec<u8>> {
    if offset_table.is_empty() {
        if fragments.len() == number_of_frames as usize {
            return Ok(fragments[frame_index as usize].clone());
        }
        return Err(DicomError::MalformedSequence {
            offset: 0,
            reason: format!(
                "no offset table and {} fragments for {number_of_frames} frames",
                fragments.len()
            ),
        });
    }
    if offset_table.len() != number_of_frames as usize {
        return Err(DicomError::MalformedSequence {
            offset: 0,
            reason: format!(
                "offset table has {} entries for {number_of_frames} frames",
                offset_table.len()
            ),
        });
    }

    // Byte position of each fragment item start, relative to the byte after
    // the offset table item.
    let mut positions = Vec::with_capacity(fragments.len());
    let mut pos: u64 = 0;
    for fragment in fragments {
        positions.push(pos);
        pos += 8 + fragment.len() as u64;
    }

    let begin = u64::from(offset_table[frame_index as usize]);
    let end = offset_table
        .get(frame_index as usize + 1)
        .map(|&o| u64::from(o))
        .unwrap_or(pos);
    let first = positions
        .binary_search(&begin)
        .map_err(|_| DicomError::MalformedSequence {
            offset: begin as usize,
            reason: "offset table entry does not point at a fragment".into(),
        })?;

    let mut data = Vec::new();
    let mut i = first;
    while i < fragments.len() && positions[i] < end {
        data.extend_from_slice(&fragments[i]);
        i += 1;
    }
    Ok(data)
}
