//! DICOM Part-10 byte-stream parser.

use super::{tags, DataElement, DataSet, DicomError, Result, Tag, Value, Vr};

const PREAMBLE_LEN: usize = 128;
const UNDEFINED_LENGTH: u32 = 0xFFFF_FFFF;
const MAX_SEQUENCE_DEPTH: usize = 64;

/// Dictionary of the attributes this pipeline needs, for implicit VR input.
/// Unknown implicit-VR tags are stored as opaque UN bytes.
fn dictionary_vr(tag: Tag) -> Vr {
    use tags::*;
    match tag {
        IMAGE_TYPE | MODALITY | PHOTOMETRIC_INTERPRETATION | DIMENSION_ORGANIZATION_TYPE => Vr::CS,
        SOP_CLASS_UID | SOP_INSTANCE_UID | STUDY_INSTANCE_UID | SERIES_INSTANCE_UID => Vr::UI,
        PATIENT_ID => Vr::LO,
        NUMBER_OF_FRAMES => Vr::IS,
        PIXEL_SPACING => Vr::DS,
        SAMPLES_PER_PIXEL | PLANAR_CONFIGURATION | ROWS | COLUMNS | BITS_ALLOCATED
        | BITS_STORED | HIGH_BIT | PIXEL_REPRESENTATION => Vr::US,
        TOTAL_PIXEL_MATRIX_COLUMNS | TOTAL_PIXEL_MATRIX_ROWS => Vr::UL,
        PIXEL_MEASURES_SEQUENCE | SHARED_FUNCTIONAL_GROUPS => Vr::SQ,
        PIXEL_DATA => Vr::OW,
        _ => Vr::UN,
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn truncated(&self) -> DicomError {
        DicomError::TruncatedElement { offset: self.pos }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.truncated());
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16_le(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32_le(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn tag(&mut self) -> Result<Tag> {
        let group = self.u16_le()?;
        let element = self.u16_le()?;
        Ok(Tag::new(group, element))
    }

    fn peek_tag(&self) -> Option<Tag> {
        if self.remaining() < 4 {
            return None;
        }
        let b = &self.buf[self.pos..self.pos + 4];
        Some(Tag::new(
            u16::from_le_bytes([b[0], b[1]]),
            u16::from_le_bytes([b[2], b[3]]),
        ))
    }
}

/// Parses a complete Part-10 file: 128-byte preamble, "DICM" magic, explicit
/// VR file meta (group 0002), then the main dataset in the transfer syntax
/// declared by (0002,0010).
pub fn parse_part10(bytes: &[u8]) -> Result<DataSet> {
    if bytes.len() < PREAMBLE_LEN + 4 || &bytes[PREAMBLE_LEN..PREAMBLE_LEN + 4] != b"DICM" {
        return Err(DicomError::MissingMagic);
    }
    let mut cur = Cursor::new(bytes);
    cur.pos = PREAMBLE_LEN + 4;

    let meta = parse_file_meta(&mut cur)?;
    let transfer_syntax = meta
        .iter()
        .find(|e| e.tag == tags::TRANSFER_SYNTAX_UID)
        .and_then(|e| e.string())
        .ok_or_else(|| DicomError::UnsupportedTransferSyntax("(0002,0010) absent".into()))?;

    if !super::SUPPORTED_TRANSFER_SYNTAXES.contains(&transfer_syntax.as_str()) {
        return Err(DicomError::UnsupportedTransferSyntax(transfer_syntax));
    }
    let explicit = transfer_syntax != super::TS_IMPLICIT_VR_LE;

    let end = bytes.len();
    let elements = parse_element_list(&mut cur, end, explicit, 0)?;

    Ok(DataSet {
        meta,
        elements,
        transfer_syntax,
    })
}

fn parse_file_meta(cur: &mut Cursor) -> Result<Vec<DataElement>> {
    let mut meta = Vec::new();
    let mut last_tag: Option<Tag> = None;
    while let Some(tag) = cur.peek_tag() {
        if tag.group != 0x0002 {
            break;
        }
        let offset = cur.pos;
        let element = parse_one_explicit(cur, 1)?;
        check_ascending(&mut last_tag, element.tag, offset)?;
        meta.push(element);
    }
    if meta.is_empty() {
        return Err(DicomError::UnsupportedTransferSyntax(
            "file meta group absent".into(),
        ));
    }
    Ok(meta)
}

fn check_ascending(last: &mut Option<Tag>, tag: Tag, offset: usize) -> Result<()> {
    if let Some(prev) = *last {
        if tag <= prev {
            return Err(DicomError::MalformedSequence {
                offset,
                reason: format!("tag {tag} not strictly ascending after {prev}"),
            });
        }
    }
    *last = Some(tag);
    Ok(())
}

/// Parses elements until `end` (exclusive byte bound) or, inside
/// undefined-length items, until an item delimiter.
fn parse_element_list(
    cur: &mut Cursor,
    end: usize,
    explicit: bool,
    depth: usize,
) -> Result<Vec<DataElement>> {
    if depth > MAX_SEQUENCE_DEPTH {
        return Err(DicomError::MalformedSequence {
            offset: cur.pos,
            reason: "sequence nesting too deep".into(),
        });
    }
    let mut elements = Vec::new();
    let mut last_tag: Option<Tag> = None;
    while cur.pos < end {
        let offset = cur.pos;
        let element = if explicit {
            parse_one_explicit(cur, depth)?
        } else {
            parse_one_implicit(cur, depth)?
        };
        if cur.pos > end {
            return Err(DicomError::TruncatedElement { offset });
        }
        check_ascending(&mut last_tag, element.tag, offset)?;
        elements.push(element);
    }
    Ok(elements)
}

fn parse_one_explicit(cur: &mut Cursor, depth: usize) -> Result<DataElement> {
    let offset = cur.pos;
    let tag = cur.tag()?;
    if tag.group == 0xFFFE {
        return Err(DicomError::MalformedSequence {
            offset,
            reason: format!("unexpected delimiter {tag} outside a sequence"),
        });
    }
    let vr_bytes = cur.take(2)?;
    let vr = Vr([vr_bytes[0], vr_bytes[1]]);
    let length = if vr.has_long_header() {
        cur.take(2)?; // reserved
        cur.u32_le()?
    } else {
        u32::from(cur.u16_le()?)
    };
    parse_value(cur, tag, vr, length, true, depth)
}

fn parse_one_implicit(cur: &mut Cursor, depth: usize) -> Result<DataElement> {
    let offset = cur.pos;
    let tag = cur.tag()?;
    if tag.group == 0xFFFE {
        return Err(DicomError::MalformedSequence {
            offset,
            reason: format!("unexpected delimiter {tag} outside a sequence"),
        });
    }
    let length = cur.u32_le()?;
    let mut vr = dictionary_vr(tag);
    // An undefined length on a non-pixel-data element always means a
    // sequence, whatever the dictionary says.
    if length == UNDEFINED_LENGTH && tag != tags::PIXEL_DATA {
        vr = Vr::SQ;
    }
    parse_value(cur, tag, vr, length, false, depth)
}

fn parse_value(
    cur: &mut Cursor,
    tag: Tag,
    vr: Vr,
    length: u32,
    explicit: bool,
    depth: usize,
) -> Result<DataElement> {
    if tag == tags::PIXEL_DATA && length == UNDEFINED_LENGTH {
        let value = parse_encapsulated_pixel_data(cur)?;
        return Ok(DataElement { tag, vr, value });
    }
    if vr == Vr::SQ {
        let items = parse_sequence_items(cur, length, explicit, depth)?;
        return Ok(DataElement {
            tag,
            vr,
            value: Value::Sequence(items),
        });
    }
    if length == UNDEFINED_LENGTH {
        return Err(DicomError::MalformedSequence {
            offset: cur.pos,
            reason: format!("undefined length on non-sequence element {tag} (VR {vr})"),
        });
    }
    let bytes = cur.take(length as usize)?.to_vec();
    Ok(DataElement {
        tag,
        vr,
        value: Value::Bytes(bytes),
    })
}

fn parse_sequence_items(
    cur: &mut Cursor,
    length: u32,
    explicit: bool,
    depth: usize,
) -> Result<Vec<Vec<DataElement>>> {
    let defined_end = if length == UNDEFINED_LENGTH {
        None
    } else {
        let end = cur
            .pos
            .checked_add(length as usize)
            .filter(|&e| e <= cur.buf.len())
            .ok_or_else(|| cur.truncated())?;
        Some(end)
    };

    let mut items = Vec::new();
    loop {
        if let Some(end) = defined_end {
            if cur.pos == end {
                return Ok(items);
            }
            if cur.pos > end {
                return Err(DicomError::MalformedSequence {
                    offset: cur.pos,
                    reason: "sequence content overran its defined length".into(),
                });
            }
        }
        let offset = cur.pos;
        let tag = cur.tag()?;
        let item_length = cur.u32_le()?;
        match tag {
            tags::SEQUENCE_DELIMITER if defined_end.is_none() => {
                if item_length != 0 {
                    return Err(DicomError::MalformedSequence {
                        offset,
                        reason: "sequence delimiter with nonzero length".into(),
                    });
                }
                return Ok(items);
            }
            tags::ITEM => {
                let item = parse_item_content(cur, item_length, explicit, depth)?;
                items.push(item);
            }
            other => {
                return Err(DicomError::MalformedSequence {
                    offset,
                    reason: format!("expected item tag, found {other}"),
                });
            }
        }
    }
}

fn parse_item_content(
    cur: &mut Cursor,
    length: u32,
    explicit: bool,
    depth: usize,
) -> Result<Vec<DataElement>> {
    if length != UNDEFINED_LENGTH {
        let end = cur
            .pos
            .checked_add(length as usize)
            .filter(|&e| e <= cur.buf.len())
            .ok_or_else(|| cur.truncated())?;
        return parse_element_list(cur, end, explicit, depth + 1);
    }
    // Undefined-length item: elements until the item delimiter.
    let mut elements = Vec::new();
    let mut last_tag: Option<Tag> = None;
    loop {
        let offset = cur.pos;
        match cur.peek_tag() {
            Some(tags::ITEM_DELIMITER) => {
                cur.tag()?;
                let len = cur.u32_le()?;
                if len != 0 {
                    return Err(DicomError::MalformedSequence {
                        offset,
                        reason: "item delimiter with nonzero length".into(),
                    });
                }
                return Ok(elements);
            }
            Some(_) => {
                let element = if explicit {
                    parse_one_explicit(cur, depth + 1)?
                } else {
                    parse_one_implicit(cur, depth + 1)?
                };
                check_ascending(&mut last_tag, element.tag, offset)?;
                elements.push(element);
            }
            None => return Err(cur.truncated()),
        }
    }
}

/// Encapsulated pixel data: a Basic Offset Table item followed by fragment
/// items, closed by a sequence delimiter.
fn parse_encapsulated_pixel_data(cur: &mut Cursor) -> Result<Value> {
    let offset = cur.pos;
    let tag = cur.tag()?;
    if tag != tags::ITEM {
        return Err(DicomError::MalformedSequence {
            offset,
            reason: format!("encapsulated pixel data must start with an item, found {tag}"),
        });
    }
    let bot_len = cur.u32_le()? as usize;
    if !bot_len.is_multiple_of(4) {
        return Err(DicomError::MalformedSequence {
            offset,
            reason: "basic offset table length not a multiple of 4".into(),
        });
    }
    let bot_bytes = cur.take(bot_len)?;
    let offset_table: Vec<u32> = bot_bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let mut fragments = Vec::new();
    loop {
        let offset = cur.pos;
        let tag = cur.tag()?;
        let len = cur.u32_le()?;
        match tag {
            tags::SEQUENCE_DELIMITER => {
                if len != 0 {
                    return Err(DicomError::MalformedSequence {
                        offset,
                        reason: "pixel data delimiter with nonzero length".into(),
                    });
                }
                return Ok(Value::Fragments {
                    offset_table,
                    fragments,
                });
            }
            tags::ITEM => {
                if len == UNDEFINED_LENGTH {
                    return Err(DicomError::MalformedSequence {
                        offset,
                        reason: "pixel data fragment with undefined length".into(),
                    });
                }
                fragments.push(cur.take(len as usize)?.to_vec());
            }
            other => {
                return Err(DicomError::MalformedSequence {
                    offset,
                    reason: format!("expected fragment item, found {other}"),
                });
            }
        }
    }
}
