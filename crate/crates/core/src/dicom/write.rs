//! Synthetic Slide Microscopy fixture writer.
//!
//! Emits small but structurally faithful Part-10 files: preamble, file meta,
//! SM metadata with the pixel-measures functional group, and native
//! (uncompressed) TILED_FULL RGB pixel data. Output bytes are a pure function
//! of the spec.

use super::{tags, DicomError, Result, Tag, Vr};
use crate::canon::fmt_f64_exact;
use crate::digest::sha256_hex_short;
use std::collections::BTreeSet;

const UID_ROOT: &str = "1.2.826.0.1.3680043.10.1337";
const UNDEFINED_LENGTH: u32 = 0xFFFF_FFFF;

/// Pixel fill for one frame of a fixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameFill {
    /// All channels set to the given value.
    Solid(u8),
    /// Fixed RGB color.
    Rgb([u8; 3]),
    /// White background (255).
    White,
    /// Dark tissue-like fill (96).
    Tissue,
    /// Left half tissue, right half white; with an even frame width the
    /// tissue fraction is exactly one half.
    HalfTissue,
}

/// Fill pattern for the whole fixture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FillPattern {
    /// Every pixel of every frame set to one value.
    Solid(u8),
    /// Frame `k` is filled with gray value `k mod 256`.
    FrameIndex,
    /// Checkerboard over global pixel coordinates with the given cell size.
    Checkerboard { period: u32 },
    /// Frames listed are fully tissue, the rest white.
    TissueBlobs { tissue_frames: BTreeSet<u32> },
    /// Explicit per-frame fills; length must equal the frame count.
    Frames(Vec<FrameFill>),
}

/// Everything that determines a synthetic SM fixture.
#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub total_cols: u32,
    pub total_rows: u32,
    pub frame_cols: u16,
    pub frame_rows: u16,
    /// (row, column) spacing in mm per pixel.
    pub pixel_spacing_mm: (f64, f64),
    pub modality: String,
    pub image_flavor: String,
    pub dimension_organization: String,
    pub fill: FillPattern,
    /// Recorded in (0002,0010). Pixel data is always written native; a
    /// non-native value here produces a file the parser must reject.
    pub transfer_syntax: String,
    pub sop_class_uid: String,
    pub patient_id: Option<String>,
    pub sop_instance_uid: Option<String>,
    pub series_instance_uid: Option<String>,
    pub study_instance_uid: Option<String>,
}

impl FixtureSpec {
    pub fn new(total_cols: u32, total_rows: u32, frame_cols: u16, frame_rows: u16) -> Self {
        Self {
            total_cols,
            total_rows,
            frame_cols,
            frame_rows,
            pixel_spacing_mm: (0.001, 0.001),
            modality: "SM".into(),
            image_flavor: "VOLUME".into(),
            dimension_organization: "TILED_FULL".into(),
            fill: FillPattern::Solid(128),
            transfer_syntax: super::TS_EXPLICIT_VR_LE.into(),
            sop_class_uid: super::SOP_CLASS_WSI.into(),
            patient_id: None,
            sop_instance_uid: None,
            series_instance_uid: None,
            study_instance_uid: None,
        }
    }

    pub fn tiles_per_row(&self) -> u32 {
        self.total_cols.div_ceil(u32::from(self.frame_cols))
    }

    pub fn tiles_per_col(&self) -> u32 {
        self.total_rows.div_ceil(u32::from(self.frame_rows))
    }

    pub fn number_of_frames(&self) -> u32 {
        self.tiles_per_row() * self.tiles_per_col()
    }

    /// Deterministic identity suffix derived from the geometry and fill, so
    /// distinct specs get distinct UIDs by default.
    fn identity(&self) -> String {
        let key = format!(
            "{}x{} f{}x{} s{}:{} {} {:?}",
            self.total_cols,
            self.total_rows,
            self.frame_cols,
            self.frame_rows,
            self.pixel_spacing_mm.0,
            self.pixel_spacing_mm.1,
            self.modality,
            self.fill
        );
        let hex = sha256_hex_short(key.as_bytes());
        // UID components must be numeric; map the hex digest to digits.
        u64::from_str_radix(&hex, 16).unwrap_or(0).to_string()
    }

    pub fn effective_sop_instance_uid(&self) -> String {
        self.sop_instance_uid
            .clone()
            .unwrap_or_else(|| format!("{UID_ROOT}.1.{}", self.identity()))
    }

    pub fn effective_series_instance_uid(&self) -> String {
        self.series_instance_uid
            .clone()
            .unwrap_or_else(|| format!("{UID_ROOT}.2.{}", self.identity()))
    }

    pub fn effective_study_instance_uid(&self) -> String {
        self.study_instance_uid
            .clone()
            .unwrap_or_else(|| format!("{UID_ROOT}.3.{}", self.identity()))
    }

    pub fn effective_patient_id(&self) -> String {
        self.patient_id.clone().unwrap_or_else(|| {
            format!(
                "FIXTURE-{}",
                &self.identity()[..6.min(self.identity().len())]
            )
        })
    }

    fn validate(&self) -> Result<()> {
        if self.total_cols == 0 || self.total_rows == 0 {
            return Err(DicomError::InvalidSpec("zero total pixel matrix".into()));
        }
        if self.frame_cols == 0 || self.frame_rows == 0 {
            return Err(DicomError::InvalidSpec("zero frame size".into()));
        }
        if u32::from(self.frame_cols) > self.total_cols
            || u32::from(self.frame_rows) > self.total_rows
        {
            return Err(DicomError::InvalidSpec(
                "frame larger than total pixel matrix".into(),
            ));
        }
        let (r, c) = self.pixel_spacing_mm;
        if !(r.is_finite() && c.is_finite() && r > 0.0 && c > 0.0) {
            return Err(DicomError::InvalidSpec(
                "pixel spacing must be positive".into(),
            ));
        }
        match &self.fill {
            FillPattern::Checkerboard { period: 0 } => {
                return Err(DicomError::InvalidSpec(
                    "checkerboard period must be > 0".into(),
                ));
            }
            FillPattern::Frames(fills) if fills.len() != self.number_of_frames() as usize => {
                return Err(DicomError::InvalidSpec(format!(
                    "per-frame fill list has {} entries for {} frames",
                    fills.len(),
                    self.number_of_frames()
                )));
            }
            _ => {}
        }
        Ok(())
    }

    /// Parses the plain `key = value` text block accepted by the CLI
    /// `fixture` command. Blank lines and `#` comments are ignored.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut spec = FixtureSpec::new(0, 0, 0, 0);
        let mut saw_dims = [false; 4];
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                DicomError::InvalidSpec(format!("line {}: expected key=value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad =
                |detail: &str| DicomError::InvalidSpec(format!("line {}: {detail}", lineno + 1));
            match key {
                "total_cols" => {
                    spec.total_cols = value.parse().map_err(|_| bad("bad total_cols"))?;
                    saw_dims[0] = true;
                }
                "total_rows" => {
                    spec.total_rows = value.parse().map_err(|_| bad("bad total_rows"))?;
                    saw_dims[1] = true;
                }
                "frame_cols" => {
                    spec.frame_cols = value.parse().map_err(|_| bad("bad frame_cols"))?;
                    saw_dims[2] = true;
                }
                "frame_rows" => {
                    spec.frame_rows = value.parse().map_err(|_| bad("bad frame_rows"))?;
                    saw_dims[3] = true;
                }
                "spacing_mm" => {
                    let s: f64 = value.parse().map_err(|_| bad("bad spacing_mm"))?;
                    spec.pixel_spacing_mm = (s, s);
                }
                "modality" => spec.modality = value.to_string(),
                "flavor" => spec.image_flavor = value.to_string(),
                "transfer_syntax" => spec.transfer_syntax = value.to_string(),
                "patient_id" => spec.patient_id = Some(value.to_string()),
                "sop_instance_uid" => spec.sop_instance_uid = Some(value.to_string()),
                "series_instance_uid" => spec.series_instance_uid = Some(value.to_string()),
                "fill" => {
                    spec.fill = match value {
                        "frame_index" => FillPattern::FrameIndex,
                        "checkerboard" => FillPattern::Checkerboard { period: 1 },
                        v if v.starts_with("solid:") => {
                            let n = v["solid:".len()..]
                                .parse()
                                .map_err(|_| bad("bad solid value"))?;
                            FillPattern::Solid(n)
                        }
                        v if v.starts_with("tissue_frames:") => {
                            let set = v["tissue_frames:".len()..]
                                .split(',')
                                .filter(|s| !s.is_empty())
                                .map(|s| s.trim().parse::<u32>())
                                .collect::<std::result::Result<BTreeSet<u32>, _>>()
                                .map_err(|_| bad("bad tissue_frames list"))?;
                            FillPattern::TissueBlobs { tissue_frames: set }
                        }
                        _ => return Err(bad("unknown fill pattern")),
                    };
                }
                other => return Err(bad(&format!("unknown key {other:?}"))),
            }
        }
        if saw_dims != [true; 4] {
            return Err(DicomError::InvalidSpec(
                "total_cols, total_rows, frame_cols and frame_rows are required".into(),
            ));
        }
        Ok(spec)
    }
}

fn frame_fill_color(fill: FrameFill, x: u32, frame_cols: u16) -> [u8; 3] {
    match fill {
        FrameFill::Solid(v) => [v; 3],
        FrameFill::Rgb(rgb) => rgb,
        FrameFill::White => [255; 3],
        FrameFill::Tissue => [96; 3],
        FrameFill::HalfTissue => {
            if x < u32::from(frame_cols) / 2 {
                [96; 3]
            } else {
                [255; 3]
            }
        }
    }
}

fn render_frame(spec: &FixtureSpec, frame_index: u32) -> Vec<u8> {
    let fw = u32::from(spec.frame_cols);
    let fh = u32::from(spec.frame_rows);
    let grid_col = frame_index % spec.tiles_per_row();
    let grid_row = frame_index / spec.tiles_per_row();
    let mut pixels = Vec::with_capacity((fw * fh * 3) as usize);
    for y in 0..fh {
        for x in 0..fw {
            let color = match &spec.fill {
                FillPattern::Solid(v) => [*v; 3],
                FillPattern::FrameIndex => [(frame_index % 256) as u8; 3],
                FillPattern::Checkerboard { period } => {
                    let gx = grid_col * fw + x;
                    let gy = grid_row * fh + y;
                    if ((gx / period) + (gy / period)).is_multiple_of(2) {
                        [0; 3]
                    } else {
                        [255; 3]
                    }
                }
                FillPattern::TissueBlobs { tissue_frames } => {
                    if tissue_frames.contains(&frame_index) {
                        [96; 3]
                    } else {
                        [255; 3]
                    }
                }
                FillPattern::Frames(fills) => {
                    frame_fill_color(fills[frame_index as usize], x, spec.frame_cols)
                }
            };
            pixels.extend_from_slice(&color);
        }
    }
    pixels
}

struct ElementWriter {
    out: Vec<u8>,
    explicit: bool,
}

impl ElementWriter {
    fn new(explicit: bool) -> Self {
        Self {
            out: Vec::new(),
            explicit,
        }
    }

    fn tag(&mut self, tag: Tag) {
        self.out.extend_from_slice(&tag.group.to_le_bytes());
        self.out.extend_from_slice(&tag.element.to_le_bytes());
    }

    fn header(&mut self, tag: Tag, vr: Vr, length: u32) {
        self.tag(tag);
        if self.explicit {
            self.out.extend_from_slice(&vr.0);
            if vr.has_long_header() {
                self.out.extend_from_slice(&[0, 0]);
                self.out.extend_from_slice(&length.to_le_bytes());
            } else {
                let short: u16 = length.try_into().expect("short VR length overflow");
                self.out.extend_from_slice(&short.to_le_bytes());
            }
        } else {
            self.out.extend_from_slice(&length.to_le_bytes());
        }
    }

    fn element(&mut self, tag: Tag, vr: Vr, value: &[u8], pad: u8) {
        let mut bytes = value.to_vec();
        if !bytes.len().is_multiple_of(2) {
            bytes.push(pad);
        }
        self.header(tag, vr, bytes.len() as u32);
        self.out.extend_from_slice(&bytes);
    }

    fn str_element(&mut self, tag: Tag, vr: Vr, value: &str) {
        // UI values pad with NUL, text VRs with space.
        let pad = if vr == Vr::UI { 0u8 } else { b' ' };
        self.element(tag, vr, value.as_bytes(), pad);
    }

    fn u16_element(&mut self, tag: Tag, value: u16) {
        self.element(tag, Vr::US, &value.to_le_bytes(), 0);
    }

    fn u32_element(&mut self, tag: Tag, value: u32) {
        self.element(tag, Vr::UL, &value.to_le_bytes(), 0);
    }
}

/// Serializes the spec to Part-10 bytes. The output round-trips through
/// [`super::parse_part10`] and [`super::extract_wsi_info`].
pub fn write_synthetic_wsi(spec: &FixtureSpec) -> Result<Vec<u8>> {
    spec.validate()?;

    let implicit_dataset = spec.transfer_syntax == super::TS_IMPLICIT_VR_LE;
    let sop_instance_uid = spec.effective_sop_instance_uid();

    // Main dataset.
    let mut w = ElementWriter::new(!implicit_dataset);
    let image_type = format!("ORIGINAL\\PRIMARY\\{}\\NONE", spec.image_flavor);
    w.str_element(tags::IMAGE_TYPE, Vr::CS, &image_type);
    w.str_element(tags::SOP_CLASS_UID, Vr::UI, &spec.sop_class_uid);
    w.str_element(tags::SOP_INSTANCE_UID, Vr::UI, &sop_instance_uid);
    w.str_element(tags::MODALITY, Vr::CS, &spec.modality);
    w.str_element(tags::PATIENT_ID, Vr::LO, &spec.effective_patient_id());
    w.str_element(
        tags::STUDY_INSTANCE_UID,
        Vr::UI,
        &spec.effective_study_instance_uid(),
    );
    w.str_element(
        tags::SERIES_INSTANCE_UID,
        Vr::UI,
        &spec.effective_series_instance_uid(),
    );
    w.str_element(
        tags::DIMENSION_ORGANIZATION_TYPE,
        Vr::CS,
        &spec.dimension_organization,
    );
    w.u16_element(tags::SAMPLES_PER_PIXEL, 3);
    w.str_element(tags::PHOTOMETRIC_INTERPRETATION, Vr::CS, "RGB");
    w.u16_element(tags::PLANAR_CONFIGURATION, 0);
    w.str_element(
        tags::NUMBER_OF_FRAMES,
        Vr::IS,
        &spec.number_of_frames().to_string(),
    );
    w.u16_element(tags::ROWS, spec.frame_rows);
    w.u16_element(tags::COLUMNS, spec.frame_cols);
    w.u16_element(tags::BITS_ALLOCATED, 8);
    w.u16_element(tags::BITS_STORED, 8);
    w.u16_element(tags::HIGH_BIT, 7);
    w.u16_element(tags::PIXEL_REPRESENTATION, 0);
    w.u32_element(tags::TOTAL_PIXEL_MATRIX_COLUMNS, spec.total_cols);
    w.u32_element(tags::TOTAL_PIXEL_MATRIX_ROWS, spec.total_rows);
    write_shared_functional_groups(&mut w, spec, implicit_dataset);
    write_pixel_data(&mut w, spec, implicit_dataset);
    let dataset = w.out;

    // File meta, always explicit VR little endian.
    let mut meta = ElementWriter::new(true);
    meta.element(tags::FILE_META_VERSION, Vr::OB, &[0, 1], 0);
    meta.str_element(
        tags::MEDIA_STORAGE_SOP_CLASS_UID,
        Vr::UI,
        &spec.sop_class_uid,
    );
    meta.str_element(
        tags::MEDIA_STORAGE_SOP_INSTANCE_UID,
        Vr::UI,
        &sop_instance_uid,
    );
    meta.str_element(tags::TRANSFER_SYNTAX_UID, Vr::UI, &spec.transfer_syntax);
    meta.str_element(
        tags::IMPLEMENTATION_CLASS_UID,
        Vr::UI,
        &format!("{UID_ROOT}.0.1"),
    );
    let meta_body = meta.out;

    let mut out = vec![0u8; 128];
    out.extend_from_slice(b"DICM");
    let mut head = ElementWriter::new(true);
    head.u32_element(tags::FILE_META_GROUP_LENGTH, meta_body.len() as u32);
    out.extend_from_slice(&head.out);
    out.extend_from_slice(&meta_body);
    out.extend_from_slice(&dataset);
    Ok(out)
}

/// SharedFunctionalGroups > PixelMeasures > PixelSpacing. The outer sequence
/// and item use undefined lengths, the inner ones defined lengths, so a
/// round-trip exercises both encodings.
fn write_shared_functional_groups(w: &mut ElementWriter, spec: &FixtureSpec, implicit: bool) {
    let spacing = format!(
        "{}\\{}",
        fmt_f64_exact(spec.pixel_spacing_mm.0),
        fmt_f64_exact(spec.pixel_spacing_mm.1)
    );
    let mut spacing_el = ElementWriter::new(!implicit);
    spacing_el.str_element(tags::PIXEL_SPACING, Vr::DS, &spacing);
    let item_body = spacing_el.out;

    let mut measures = ElementWriter::new(!implicit);
    measures.header(
        tags::PIXEL_MEASURES_SEQUENCE,
        Vr::SQ,
        (item_body.len() + 8) as u32,
    );
    measures.tag(tags::ITEM);
    measures
        .out
        .extend_from_slice(&(item_body.len() as u32).to_le_bytes());
    measures.out.extend_from_slice(&item_body);
    let outer_item_body = measures.out;

    w.header(tags::SHARED_FUNCTIONAL_GROUPS, Vr::SQ, UNDEFINED_LENGTH);
    w.tag(tags::ITEM);
    w.out.extend_from_slice(&UNDEFINED_LENGTH.to_le_bytes());
    w.out.extend_from_slice(&outer_item_body);
    w.tag(tags::ITEM_DELIMITER);
    w.out.extend_from_slice(&0u32.to_le_bytes());
    w.tag(tags::SEQUENCE_DELIMITER);
    w.out.extend_from_slice(&0u32.to_le_bytes());
}

fn write_pixel_data(w: &mut ElementWriter, spec: &FixtureSpec, implicit: bool) {
    let frame_len = usize::from(spec.frame_cols) * usize::from(spec.frame_rows) * 3;
    let mut pixels = Vec::with_capacity(frame_len * spec.number_of_frames() as usize);
    for frame in 0..spec.number_of_frames() {
        pixels.extend_from_slice(&render_frame(spec, frame));
    }
    let vr = if implicit { Vr::OW } else { Vr::OB };
    w.element(tags::PIXEL_DATA, vr, &pixels, 0);
}
