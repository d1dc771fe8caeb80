//! DICOM Part-10 parsing and Slide Microscopy (SM) whole-slide access.
//!
//! The parser handles the three transfer syntaxes that matter for this
//! pipeline — Explicit VR Little Endian, Implicit VR Little Endian (metadata
//! only, via a small tag dictionary), and JPEG Baseline encapsulation (frame
//! decoding delegated to a pluggable [`wsi::FrameCodec`]). Everything else is
//! rejected up front.
//!
//! Pixel data is kept as raw bytes at parse time and decoded lazily per
//! frame; slides are gigapixel scale and never materialized whole.

mod parse;
mod write;
mod wsi;

pub use parse::parse_part10;
pub use write::{write_synthetic_wsi, FillPattern, FixtureSpec, FrameFill};
pub use wsi::{
    extract_wsi_info, frame_for_tile, read_frame, CodecRegistry, FrameCodec, FrameImage,
    ImageFlavor, WsiInstanceInfo,
};

use std::fmt;
use thiserror::Error;

/// Transfer syntaxes accepted by [`parse_part10`].
pub const TS_IMPLICIT_VR_LE: &str = "1.2.840.10008.1.2";
pub const TS_EXPLICIT_VR_LE: &str = "1.2.840.10008.1.2.1";
pub const TS_JPEG_BASELINE: &str = "1.2.840.10008.1.2.4.50";

pub const SUPPORTED_TRANSFER_SYNTAXES: [&str; 3] =
    [TS_IMPLICIT_VR_LE, TS_EXPLICIT_VR_LE, TS_JPEG_BASELINE];

/// SOP Class UID for VL Whole Slide Microscopy Image Storage.
pub const SOP_CLASS_WSI: &str = "1.2.840.10008.5.1.4.1.1.77.1.6";

/// A (group, element) attribute tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tag {
    pub group: u16,
    pub element: u16,
}

impl Tag {
    pub const fn new(group: u16, element: u16) -> Self {
        Self { group, element }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:04x},{:04x})", self.group, self.element)
    }
}

/// Tags this crate reads or writes.
pub mod tags {
    use super::Tag;

    pub const FILE_META_GROUP_LENGTH: Tag = Tag::new(0x0002, 0x0000);
    pub const FILE_META_VERSION: Tag = Tag::new(0x0002, 0x0001);
    pub const MEDIA_STORAGE_SOP_CLASS_UID: Tag = Tag::new(0x0002, 0x0002);
    pub const MEDIA_STORAGE_SOP_INSTANCE_UID: Tag = Tag::new(0x0002, 0x0003);
    pub const TRANSFER_SYNTAX_UID: Tag = Tag::new(0x0002, 0x0010);
    pub const IMPLEMENTATION_CLASS_UID: Tag = Tag::new(0x0002, 0x0012);

    pub const IMAGE_TYPE: Tag = Tag::new(0x0008, 0x0008);
    pub const SOP_CLASS_UID: Tag = Tag::new(0x0008, 0x0016);
    pub const SOP_INSTANCE_UID: Tag = Tag::new(0x0008, 0x0018);
    pub const MODALITY: Tag = Tag::new(0x0008, 0x0060);
    pub const PATIENT_ID: Tag = Tag::new(0x0010, 0x0020);
    pub const STUDY_INSTANCE_UID: Tag = Tag::new(0x0020, 0x000D);
    pub const SERIES_INSTANCE_UID: Tag = Tag::new(0x0020, 0x000E);
    pub const DIMENSION_ORGANIZATION_TYPE: Tag = Tag::new(0x0020, 0x9311);
    pub const SAMPLES_PER_PIXEL: Tag = Tag::new(0x0028, 0x0002);
    pub const PHOTOMETRIC_INTERPRETATION: Tag = Tag::new(0x0028, 0x0004);
    pub const PLANAR_CONFIGURATION: Tag = Tag::new(0x0028, 0x0006);
    pub const NUMBER_OF_FRAMES: Tag = Tag::new(0x0028, 0x0008);
    pub const ROWS: Tag = Tag::new(0x0028, 0x0010);
    pub const COLUMNS: Tag = Tag::new(0x0028, 0x0011);
    pub const PIXEL_SPACING: Tag = Tag::new(0x0028, 0x0030);
    pub const BITS_ALLOCATED: Tag = Tag::new(0x0028, 0x0100);
    pub const BITS_STORED: Tag = Tag::new(0x0028, 0x0101);
    pub const HIGH_BIT: Tag = Tag::new(0x0028, 0x0102);
    pub const PIXEL_REPRESENTATION: Tag = Tag::new(0x0028, 0x0103);
    pub const PIXEL_MEASURES_SEQUENCE: Tag = Tag::new(0x0028, 0x9110);
    pub const TOTAL_PIXEL_MATRIX_COLUMNS: Tag = Tag::new(0x0048, 0x0006);
    pub const TOTAL_PIXEL_MATRIX_ROWS: Tag = Tag::new(0x0048, 0x0007);
    pub const SHARED_FUNCTIONAL_GROUPS: Tag = Tag::new(0x5200, 0x9229);
    pub const PIXEL_DATA: Tag = Tag::new(0x7FE0, 0x0010);

    pub const ITEM: Tag = Tag::new(0xFFFE, 0xE000);
    pub const ITEM_DELIMITER: Tag = Tag::new(0xFFFE, 0xE00D);
    pub const SEQUENCE_DELIMITER: Tag = Tag::new(0xFFFE, 0xE0DD);
}

/// Two-letter value representation code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vr(pub [u8; 2]);

impl Vr {
    pub const AE: Vr = Vr(*b"AE");
    pub const CS: Vr = Vr(*b"CS");
    pub const DS: Vr = Vr(*b"DS");
    pub const IS: Vr = Vr(*b"IS");
    pub const LO: Vr = Vr(*b"LO");
    pub const OB: Vr = Vr(*b"OB");
    pub const OW: Vr = Vr(*b"OW");
    pub const SQ: Vr = Vr(*b"SQ");
    pub const UI: Vr = Vr(*b"UI");
    pub const UL: Vr = Vr(*b"UL");
    pub const UN: Vr = Vr(*b"UN");
    pub const US: Vr = Vr(*b"US");

    pub fn as_str(&self) -> &str {
        std::str::from_utf8(&self.0).unwrap_or("??")
    }

    /// VRs encoded with the 12-byte explicit header (2 reserved bytes plus a
    /// 32-bit length) rather than the 8-byte one.
    pub fn has_long_header(&self) -> bool {
        matches!(
            &self.0,
            b"OB" | b"OD" | b"OF" | b"OL" | b"OV" | b"OW" | b"SQ" | b"UC" | b"UN" | b"UR" | b"UT"
        )
    }
}

impl fmt::Display for Vr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Element payload: primitive bytes, a parsed sequence, or encapsulated
/// pixel-data fragments.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Bytes(Vec<u8>),
    Sequence(Vec<Vec<DataElement>>),
    Fragments {
        /// Basic Offset Table entries (byte offsets of each frame's first
        /// fragment item, relative to the byte after the table item).
        offset_table: Vec<u32>,
        fragments: Vec<Vec<u8>>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataElement {
    pub tag: Tag,
    pub vr: Vr,
    pub value: Value,
}

impl DataElement {
    pub fn bytes(&self) -> Option<&[u8]> {
        match &self.value {
            Value::Bytes(b) => Some(b),
            _ => None,
        }
    }

    pub fn items(&self) -> Option<&[Vec<DataElement>]> {
        match &self.value {
            Value::Sequence(items) => Some(items),
            _ => None,
        }
    }

    /// String value with DICOM padding (trailing NUL / space) removed.
    pub fn string(&self) -> Option<String> {
        let bytes = self.bytes()?;
        let s = String::from_utf8_lossy(bytes);
        Some(s.trim_end_matches(['\0', ' ']).to_string())
    }
}

/// A parsed DICOM object: file-meta elements plus the main element list,
/// both in ascending tag order. Immutable after parsing as far as this crate
/// is concerned; mutation helpers exist for constructing test inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    pub meta: Vec<DataElement>,
    pub elements: Vec<DataElement>,
    pub transfer_syntax: String,
}

impl DataSet {
    pub fn element(&self, tag: Tag) -> Option<&DataElement> {
        self.elements
            .binary_search_by(|e| e.tag.cmp(&tag))
            .ok()
            .map(|i| &self.elements[i])
    }

    pub fn meta_element(&self, tag: Tag) -> Option<&DataElement> {
        self.meta
            .binary_search_by(|e| e.tag.cmp(&tag))
            .ok()
            .map(|i| &self.meta[i])
    }

    pub fn string_value(&self, tag: Tag) -> Option<String> {
        self.element(tag).and_then(|e| e.string())
    }

    pub fn u16_value(&self, tag: Tag) -> Option<u16> {
        let e = self.element(tag)?;
        let b = e.bytes()?;
        if b.len() < 2 {
            return None;
        }
        Some(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32_value(&self, tag: Tag) -> Option<u32> {
        let e = self.element(tag)?;
        let b = e.bytes()?;
        if b.len() < 4 {
            return None;
        }
        Some(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// Removes an element from the main list (test fixture manipulation).
    pub fn remove_element(&mut self, tag: Tag) -> bool {
        match self.elements.binary_search_by(|e| e.tag.cmp(&tag)) {
            Ok(i) => {
                self.elements.remove(i);
                true
            }
            Err(_) => false,
        }
    }
}

#[derive(Debug, Error)]
pub enum DicomError {
    #[error("not a DICOM file: missing preamble/DICM magic")]
    MissingMagic,
    #[error("unsupported transfer syntax {0:?}")]
    UnsupportedTransferSyntax(String),
    #[error("element at offset {offset} exceeds remaining input")]
    TruncatedElement { offset: usize },
    #[error("malformed sequence at offset {offset}: {reason}")]
    MalformedSequence { offset: usize, reason: String },
    #[error("not a slide microscopy instance: {0}")]
    NotSlideMicroscopy(String),
    #[error("missing required attribute {0}")]
    MissingAttribute(Tag),
    #[error("malformed attribute {tag}: {detail}")]
    MalformedAttribute { tag: Tag, detail: String },
    #[error("unsupported dimension organization: {0}")]
    UnsupportedOrganization(String),
    #[error("tile ({col},{row}) outside the {tiles_x}x{tiles_y} grid")]
    OutOfGrid {
        col: u32,
        row: u32,
        tiles_x: u32,
        tiles_y: u32,
    },
    #[error("frame {frame} out of range (instance has {count} frames)")]
    FrameOutOfRange { frame: u32, count: u32 },
    #[error("no codec registered for transfer syntax {0:?}")]
    CodecUnavailable(String),
    #[error("frame {frame} decode failed at byte {offset}: {detail}")]
    DecodeFailure {
        frame: u32,
        offset: usize,
        detail: String,
    },
    #[error("invalid fixture spec: {0}")]
    InvalidSpec(String),
}

pub type Result<T> = std::result::Result<T, DicomError>;
