//! Canonical JSON emission.
//!
//! Reports and run records must serialize to byte-identical JSON whenever they
//! are semantically equal, so the emitters in this crate are hand-rolled: keys
//! are written in sorted order and floats use a fixed significant-digit
//! format instead of a shortest-representation one.

/// Formats a float with 12 significant digits in exponent notation.
///
/// 12 digits are well inside the 15-digit decimal round-trip guarantee for
/// f64, so `parse(format(x))` re-formats to the identical string.
pub fn fmt_f64_sig12(x: f64) -> String {
    debug_assert!(x.is_finite(), "canonical JSON floats must be finite");
    format!("{x:.11e}")
}

/// Formats a float with 17 significant digits, which round-trips every f64
/// bit pattern exactly. Used where exact values matter (model parameters).
pub fn fmt_f64_exact(x: f64) -> String {
    debug_assert!(x.is_finite(), "canonical JSON floats must be finite");
    format!("{x:.16e}")
}

/// JSON string escaping per RFC 8259 (control characters as \u00XX).
pub fn escape_str(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

/// Builder for one JSON object with keys emitted in the order `field` is
/// called. Callers are responsible for calling fields in sorted key order;
/// `finish` asserts it in debug builds.
pub struct ObjectWriter {
    out: String,
    first: bool,
    last_key: Option<String>,
}

impl ObjectWriter {
    pub fn new() -> Self {
        Self {
            out: String::from("{"),
            first: true,
            last_key: None,
        }
    }

    /// Appends `"key":<raw json>`.
    pub fn field_raw(&mut self, key: &str, raw: &str) -> &mut Self {
        if let Some(prev) = &self.last_key {
            debug_assert!(
                prev.as_str() < key,
                "canonical object keys out of order: {prev:?} then {key:?}"
            );
        }
        if !self.first {
            self.out.push(',');
        }
        self.first = false;
        self.out.push_str(&escape_str(key));
        self.out.push(':');
        self.out.push_str(raw);
        self.last_key = Some(key.to_string());
        self
    }

    pub fn field_str(&mut self, key: &str, value: &str) -> &mut Self {
        let quoted = escape_str(value);
        self.field_raw(key, &quoted)
    }

    pub fn field_u64(&mut self, key: &str, value: u64) -> &mut Self {
        self.field_raw(key, &value.to_string())
    }

    pub fn field_f64(&mut self, key: &str, value: f64) -> &mut Self {
        let formatted = fmt_f64_sig12(value);
        self.field_raw(key, &formatted)
    }

    pub fn field_bool(&mut self, key: &str, value: bool) -> &mut Self {
        self.field_raw(key, if value { "true" } else { "false" })
    }

    pub fn finish(mut self) -> String {
        self.out.push('}');
        self.out
    }
}

impl Default for ObjectWriter {
    fn default() -> Self {
        Self::new()
    }
}

/// Joins raw JSON values into an array.
pub fn array(items: impl IntoIterator<Item = String>) -> String {
    let mut out = String::from("[");
    for (i, item) in items.into_iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&item);
    }
    out.push(']');
    out
}
