//! Versioned slide-metadata catalog with deterministic predicate queries.
//!
//! An offline stand-in for the BigQuery `dicom_all` workflow: one manifest
//! file per catalog release, a small predicate AST instead of SQL, and a
//! mandatory sort order so that query results are reproducible byte for byte.

use crate::class::Class;
use crate::digest::sha256_hex;
use crate::rng::{fisher_yates, hash64, SplitMix64};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use thiserror::Error;

/// One slide's metadata row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogRecord {
    pub collection_id: String,
    pub patient_id: String,
    pub study_instance_uid: String,
    pub series_instance_uid: String,
    pub sop_instance_uid: String,
    pub modality: String,
    pub image_type_flavor: String,
    /// Two-character TCGA-style sample type code; may be empty.
    pub sample_type_code: String,
    /// `None` until [`derive_reference_class`] runs or the manifest presets it.
    pub reference_class: Option<Class>,
    pub pixel_spacing_mm: f64,
    pub gcs_url: String,
    /// Attributes beyond the fixed schema.
    pub extra: BTreeMap<String, String>,
}

/// Built-in attribute names addressable in queries and sort specs.
const FIELD_NAMES: [&str; 11] = [
    "collection_id",
    "patient_id",
    "study_instance_uid",
    "series_instance_uid",
    "sop_instance_uid",
    "modality",
    "image_type_flavor",
    "sample_type_code",
    "reference_class",
    "pixel_spacing_mm",
    "gcs_url",
];

impl CatalogRecord {
    /// String form of a built-in field or extra attribute, if present.
    pub fn attribute(&self, name: &str) -> Option<String> {
        match name {
            "collection_id" => Some(self.collection_id.clone()),
            "patient_id" => Some(self.patient_id.clone()),
            "study_instance_uid" => Some(self.study_instance_uid.clone()),
            "series_instance_uid" => Some(self.series_instance_uid.clone()),
            "sop_instance_uid" => Some(self.sop_instance_uid.clone()),
            "modality" => Some(self.modality.clone()),
            "image_type_flavor" => Some(self.image_type_flavor.clone()),
            "sample_type_code" => Some(self.sample_type_code.clone()),
            "reference_class" => self.reference_class.map(|c| c.name().to_string()),
            "pixel_spacing_mm" => Some(self.pixel_spacing_mm.to_string()),
            "gcs_url" => Some(self.gcs_url.clone()),
            other => self.extra.get(other).cloned(),
        }
    }

    /// Canonical one-line encoding, also used as the manifest record format.
    pub fn to_manifest_line(&self) -> String {
        let mut parts = vec![
            format!("collection_id={}", self.collection_id),
            format!("patient_id={}", self.patient_id),
            format!("study_instance_uid={}", self.study_instance_uid),
            format!("series_instance_uid={}", self.series_instance_uid),
            format!("sop_instance_uid={}", self.sop_instance_uid),
            format!("modality={}", self.modality),
            format!("image_type_flavor={}", self.image_type_flavor),
            format!("sample_type_code={}", self.sample_type_code),
            format!("pixel_spacing_mm={}", self.pixel_spacing_mm),
            format!("gcs_url={}", self.gcs_url),
        ];
        if let Some(class) = self.reference_class {
            parts.push(format!("reference_class={}", class.name()));
        }
        for (k, v) in &self.extra {
            parts.push(format!("{k}={v}"));
        }
        parts.join("\t")
    }
}

/// A loaded catalog release.
#[derive(Debug, Clone)]
pub struct Catalog {
    pub version_id: String,
    pub records: Vec<CatalogRecord>,
    /// SHA-256 of the manifest bytes.
    pub source_digest: String,
}

/// Predicate AST over catalog attributes.
///
/// Built-in field names and any extra key appearing in the catalog form the
/// queryable schema; referencing anything else is
/// [`CatalogError::UnknownAttribute`]. `Exists` is the deliberate exception —
/// its whole point is probing for attributes that may be absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum QueryExpr {
    Eq { attr: String, value: String },
    In { attr: String, values: Vec<String> },
    Prefix { attr: String, value: String },
    Exists { attr: String },
    And { args: Vec<QueryExpr> },
    Or { args: Vec<QueryExpr> },
    Not { arg: Box<QueryExpr> },
}

impl QueryExpr {
    pub fn eq(attr: &str, value: &str) -> Self {
        QueryExpr::Eq {
            attr: attr.into(),
            value: value.into(),
        }
    }

    pub fn is_in(attr: &str, values: &[&str]) -> Self {
        QueryExpr::In {
            attr: attr.into(),
            values: values.iter().map(|v| v.to_string()).collect(),
        }
    }

    pub fn and(args: Vec<QueryExpr>) -> Self {
        QueryExpr::And { args }
    }

    fn eval(&self, record: &CatalogRecord) -> bool {
        match self {
            QueryExpr::Eq { attr, value } => {
                record.attribute(attr).as_deref() == Some(value.as_str())
            }
            QueryExpr::In { attr, values } => record
                .attribute(attr)
                .map(|v| values.contains(&v))
                .unwrap_or(false),
            QueryExpr::Prefix { attr, value } => record
                .attribute(attr)
                .map(|v| v.starts_with(value))
                .unwrap_or(false),
            QueryExpr::Exists { attr } => record.attribute(attr).is_some(),
            QueryExpr::And { args } => args.iter().all(|e| e.eval(record)),
            QueryExpr::Or { args } => args.iter().any(|e| e.eval(record)),
            QueryExpr::Not { arg } => !arg.eval(record),
        }
    }

    /// Attribute names referenced outside `Exists`.
    fn referenced_attrs(&self, out: &mut BTreeSet<String>) {
        match self {
            QueryExpr::Eq { attr, .. }
            | QueryExpr::In { attr, .. }
            | QueryExpr::Prefix { attr, .. } => {
                out.insert(attr.clone());
            }
            QueryExpr::Exists { .. } => {}
            QueryExpr::And { args } | QueryExpr::Or { args } => {
                for arg in args {
                    arg.referenced_attrs(out);
                }
            }
            QueryExpr::Not { arg } => arg.referenced_attrs(out),
        }
    }

    /// Renders the equivalent BigQuery statement for provenance records.
    pub fn to_sql(&self, catalog_version: &str, sort: &SortSpec) -> String {
        format!(
            "SELECT gcs_url, * FROM `bigquery-public-data.{}.dicom_all` WHERE {} ORDER BY {}",
            catalog_version,
            self.to_sql_predicate(),
            sort.to_sql()
        )
    }

    fn to_sql_predicate(&self) -> String {
        match self {
            QueryExpr::Eq { attr, value } => format!("{attr} = \"{value}\""),
            QueryExpr::In { attr, values } => {
                let list: Vec<String> = values.iter().map(|v| format!("\"{v}\"")).collect();
                format!("{attr} IN ({})", list.join(", "))
            }
            QueryExpr::Prefix { attr, value } => format!("STARTS_WITH({attr}, \"{value}\")"),
            QueryExpr::Exists { attr } => format!("{attr} IS NOT NULL"),
            QueryExpr::And { args } => join_sql(args, " AND "),
            QueryExpr::Or { args } => join_sql(args, " OR "),
            QueryExpr::Not { arg } => format!("NOT ({})", arg.to_sql_predicate()),
        }
    }
}

fn join_sql(args: &[QueryExpr], sep: &str) -> String {
    let parts: Vec<String> = args
        .iter()
        .map(|a| format!("({})", a.to_sql_predicate()))
        .collect();
    parts.join(sep)
}

/// Sort order for query results. Never empty; on top of the listed keys every
/// query breaks remaining ties by ascending `sop_instance_uid`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SortSpec {
    pub keys: Vec<(String, SortDirection)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SortDirection {
    Ascending,
    Descending,
}

impl SortSpec {
    pub fn by(attr: &str) -> Self {
        SortSpec {
            keys: vec![(attr.to_string(), SortDirection::Ascending)],
        }
    }

    pub fn new(keys: Vec<(String, SortDirection)>) -> Result<Self, CatalogError> {
        if keys.is_empty() {
            return Err(CatalogError::EmptySort);
        }
        Ok(SortSpec { keys })
    }

    fn to_sql(&self) -> String {
        let parts: Vec<String> = self
            .keys
            .iter()
            .map(|(attr, dir)| match dir {
                SortDirection::Ascending => format!("{attr} ASC"),
                SortDirection::Descending => format!("{attr} DESC"),
            })
            .collect();
        format!("{}, sop_instance_uid ASC", parts.join(", "))
    }
}

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("catalog version mismatch: manifest is {found:?}, expected {expected:?}")]
    VersionMismatch { expected: String, found: String },
    #[error("malformed manifest record at line {line}: {detail}")]
    MalformedRecord { line: usize, detail: String },
    #[error("duplicate sop_instance_uid {0:?} in manifest")]
    DuplicateSop(String),
    #[error("unknown attribute {0:?}")]
    UnknownAttribute(String),
    #[error("sort spec must not be empty")]
    EmptySort,
    #[error("record {sop_instance_uid:?} has no reference class mapping ({detail})")]
    UnmappableRecord {
        sop_instance_uid: String,
        detail: String,
    },
    #[error("class {class} has {have} records, need {need}")]
    InsufficientClass {
        class: Class,
        have: usize,
        need: usize,
    },
    #[error("record {0:?} has no derived reference class yet")]
    UnclassifiedRecord(String),
    #[error("manifest i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Loads a manifest file, checking its header version against the version
/// the caller expects. Version pinning is what keeps downstream runs
/// reproducible across catalog releases.
pub fn load_catalog(path: &Path, expected_version: &str) -> Result<Catalog, CatalogError> {
    let bytes = std::fs::read(path)?;
    load_catalog_bytes(&bytes, expected_version)
}

pub fn load_catalog_bytes(bytes: &[u8], expected_version: &str) -> Result<Catalog, CatalogError> {
    let text = std::str::from_utf8(bytes).map_err(|e| CatalogError::MalformedRecord {
        line: 0,
        detail: format!("manifest is not UTF-8: {e}"),
    })?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(CatalogError::MalformedRecord {
        line: 1,
        detail: "empty manifest".into(),
    })?;
    let version_id = header
        .strip_prefix("#catalog-version:")
        .ok_or(CatalogError::MalformedRecord {
            line: 1,
            detail: "missing #catalog-version header".into(),
        })?
        .trim()
        .to_string();
    if version_id != expected_version {
        return Err(CatalogError::VersionMismatch {
            expected: expected_version.to_string(),
            found: version_id,
        });
    }

    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let record = parse_record_line(line, line_no)?;
        if !seen.insert((
            record.series_instance_uid.clone(),
            record.sop_instance_uid.clone(),
        )) {
            return Err(CatalogError::DuplicateSop(record.sop_instance_uid));
        }
        records.push(record);
    }

    Ok(Catalog {
        version_id,
        records,
        source_digest: sha256_hex(bytes),
    })
}

fn parse_record_line(line: &str, line_no: usize) -> Result<CatalogRecord, CatalogError> {
    let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
    for part in line.split('\t') {
        let (key, value) = part.split_once('=').ok_or(CatalogError::MalformedRecord {
            line: line_no,
            detail: format!("expected key=value, got {part:?}"),
        })?;
        fields.insert(key, value);
    }
    let take = |fields: &mut BTreeMap<&str, &str>, key: &str| {
        fields
            .remove(key)
            .map(|v| v.to_string())
            .unwrap_or_default()
    };
    let mut record = CatalogRecord {
        collection_id: take(&mut fields, "collection_id"),
        patient_id: take(&mut fields, "patient_id"),
        study_instance_uid: take(&mut fields, "study_instance_uid"),
        series_instance_uid: take(&mut fields, "series_instance_uid"),
        sop_instance_uid: take(&mut fields, "sop_instance_uid"),
        modality: take(&mut fields, "modality"),
        image_type_flavor: take(&mut fields, "image_type_flavor"),
        sample_type_code: take(&mut fields, "sample_type_code"),
        reference_class: None,
        pixel_spacing_mm: 0.0,
        gcs_url: take(&mut fields, "gcs_url"),
        extra: BTreeMap::new(),
    };
    if let Some(raw) = fields.remove("reference_class") {
        record.reference_class = Some(raw.parse().map_err(|e| CatalogError::MalformedRecord {
            line: line_no,
            detail: e,
        })?);
    }
    if let Some(raw) = fields.remove("pixel_spacing_mm") {
        record.pixel_spacing_mm = raw.parse().map_err(|_| CatalogError::MalformedRecord {
            line: line_no,
            detail: format!("bad pixel_spacing_mm {raw:?}"),
        })?;
    }
    for (k, v) in fields {
        record.extra.insert(k.to_string(), v.to_string());
    }
    if record.sop_instance_uid.is_empty() {
        return Err(CatalogError::MalformedRecord {
            line: line_no,
            detail: "sop_instance_uid is required".into(),
        });
    }
    if record.gcs_url.is_empty() {
        return Err(CatalogError::MalformedRecord {
            line: line_no,
            detail: "gcs_url is required".into(),
        });
    }
    Ok(record)
}

/// The queryable schema of a catalog: built-in fields plus every extra key
/// present on any record.
fn schema(catalog: &Catalog) -> BTreeSet<String> {
    let mut names: BTreeSet<String> = FIELD_NAMES.iter().map(|s| s.to_string()).collect();
    for record in &catalog.records {
        names.extend(record.extra.keys().cloned());
    }
    names
}

/// Evaluates a predicate over the catalog and returns matching records in
/// the order given by `sort` (ties broken by ascending `sop_instance_uid`).
pub fn query(
    catalog: &Catalog,
    expr: &QueryExpr,
    sort: &SortSpec,
) -> Result<Vec<CatalogRecord>, CatalogError> {
    if sort.keys.is_empty() {
        return Err(CatalogError::EmptySort);
    }
    let known = schema(catalog);
    let mut referenced = BTreeSet::new();
    expr.referenced_attrs(&mut referenced);
    for (attr, _) in &sort.keys {
        referenced.insert(attr.clone());
    }
    for attr in &referenced {
        if !known.contains(attr) {
            return Err(CatalogError::UnknownAttribute(attr.clone()));
        }
    }

    let mut matches: Vec<CatalogRecord> = catalog
        .records
        .iter()
        .filter(|r| expr.eval(r))
        .cloned()
        .collect();
    matches.sort_by(|a, b| compare_records(a, b, sort));
    Ok(matches)
}

fn compare_records(a: &CatalogRecord, b: &CatalogRecord, sort: &SortSpec) -> Ordering {
    for (attr, dir) in &sort.keys {
        let ord = if attr == "pixel_spacing_mm" {
            a.pixel_spacing_mm.total_cmp(&b.pixel_spacing_mm)
        } else {
            // Absent extra attributes sort before present ones.
            a.attribute(attr).cmp(&b.attribute(attr))
        };
        let ord = match dir {
            SortDirection::Ascending => ord,
            SortDirection::Descending => ord.reverse(),
        };
        if ord != Ordering::Equal {
            return ord;
        }
    }
    a.sop_instance_uid.cmp(&b.sop_instance_uid)
}

/// TCGA sample type codes denoting non-tumor tissue.
const NORMAL_SAMPLE_CODES: [&str; 5] = ["10", "11", "12", "13", "14"];

/// Fills in the reference class: manifest presets win, then the sample-type
/// code decides normal tissue, then the collection name decides the tumor
/// subtype.
pub fn derive_reference_class(record: &CatalogRecord) -> Result<CatalogRecord, CatalogError> {
    let mut out = record.clone();
    if out.reference_class.is_some() {
        return Ok(out);
    }
    if NORMAL_SAMPLE_CODES.contains(&record.sample_type_code.as_str()) {
        out.reference_class = Some(Class::Normal);
        return Ok(out);
    }
    let collection = record.collection_id.as_str();
    if collection.ends_with("-LUAD") {
        out.reference_class = Some(Class::Luad);
    } else if collection.ends_with("-LUSC") || collection.ends_with("-LSCC") {
        out.reference_class = Some(Class::Lscc);
    } else {
        return Err(CatalogError::UnmappableRecord {
            sop_instance_uid: record.sop_instance_uid.clone(),
            detail: format!(
                "collection {collection:?}, sample type {:?}",
                record.sample_type_code
            ),
        });
    }
    Ok(out)
}

/// Per-class slide counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CohortSummary {
    pub normal: usize,
    pub luad: usize,
    pub lscc: usize,
}

impl CohortSummary {
    pub fn total(&self) -> usize {
        self.normal + self.luad + self.lscc
    }

    pub fn count(&self, class: Class) -> usize {
        match class {
            Class::Normal => self.normal,
            Class::Luad => self.luad,
            Class::Lscc => self.lscc,
        }
    }
}

pub fn cohort_summary(records: &[CatalogRecord]) -> Result<CohortSummary, CatalogError> {
    let mut summary = CohortSummary {
        normal: 0,
        luad: 0,
        lscc: 0,
    };
    for record in records {
        match record.reference_class {
            Some(Class::Normal) => summary.normal += 1,
            Some(Class::Luad) => summary.luad += 1,
            Some(Class::Lscc) => summary.lscc += 1,
            None => {
                return Err(CatalogError::UnclassifiedRecord(
                    record.sop_instance_uid.clone(),
                ))
            }
        }
    }
    Ok(summary)
}

/// Draws `per_class_n` slides per class, deterministically.
///
/// Selection is insensitive to input order: each class is sorted by
/// `sop_instance_uid`, shuffled with a stream seeded by
/// `seed ^ hash64(class_name)`, truncated, and the final result re-sorted by
/// `sop_instance_uid`.
pub fn subsample_stratified(
    records: &[CatalogRecord],
    per_class_n: usize,
    seed: u64,
) -> Result<Vec<CatalogRecord>, CatalogError> {
    let mut by_class: BTreeMap<Class, Vec<&CatalogRecord>> = BTreeMap::new();
    for record in records {
        let class = record
            .reference_class
            .ok_or_else(|| CatalogError::UnclassifiedRecord(record.sop_instance_uid.clone()))?;
        by_class.entry(class).or_default().push(record);
    }
    let mut picked = Vec::with_capacity(per_class_n * Class::ALL.len());
    for class in Class::ALL {
        let mut members = by_class.remove(&class).unwrap_or_default();
        if members.len() < per_class_n {
            return Err(CatalogError::InsufficientClass {
                class,
                have: members.len(),
                need: per_class_n,
            });
        }
        members.sort_by(|a, b| a.sop_instance_uid.cmp(&b.sop_instance_uid));
        let mut rng = SplitMix64::new(seed ^ hash64(class.name()));
        fisher_yates(&mut members, &mut rng);
        picked.extend(members.into_iter().take(per_class_n).cloned());
    }
    picked.sort_by(|a, b| a.sop_instance_uid.cmp(&b.sop_instance_uid));
    Ok(picked)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(sop: &str, collection: &str, modality: &str, code: &str) -> CatalogRecord {
        CatalogRecord {
            collection_id: collection.into(),
            patient_id: format!("P-{sop}"),
            study_instance_uid: format!("st.{sop}"),
            series_instance_uid: format!("se.{sop}"),
            sop_instance_uid: sop.into(),
            modality: modality.into(),
            image_type_flavor: "VOLUME".into(),
            sample_type_code: code.into(),
            reference_class: None,
            pixel_spacing_mm: 0.001,
            gcs_url: format!("gs://bucket/{sop}.dcm"),
            extra: BTreeMap::new(),
        }
    }

    fn manifest(records: &[CatalogRecord]) -> String {
        let mut out = String::from("#catalog-version:idc_v11\n");
        for r in records {
            out.push_str(&r.to_manifest_line());
            out.push('\n');
        }
        out
    }

    fn mixed_catalog() -> Catalog {
        let records = vec![
            record("1.1", "TCGA-LUAD", "SM", "01"),
            record("1.2", "TCGA-LUSC", "SM", "01"),
            record("1.3", "TCGA-LUAD", "SM", "11"),
            record("1.4", "TCGA-LUSC", "SM", "11"),
            record("1.5", "TCGA-BRCA", "SM", "01"),
            record("1.6", "TCGA-LUAD", "CT", "01"),
        ];
        load_catalog_bytes(manifest(&records).as_bytes(), "idc_v11").unwrap()
    }

    #[test]
    fn load_checks_version_and_duplicates() {
        let records = vec![record("1.1", "TCGA-LUAD", "SM", "01")];
        let text = manifest(&records);
        let catalog = load_catalog_bytes(text.as_bytes(), "idc_v11").unwrap();
        assert_eq!(catalog.records.len(), 1);
        assert_eq!(catalog.version_id, "idc_v11");

        assert!(matches!(
            load_catalog_bytes(text.as_bytes(), "idc_v10"),
            Err(CatalogError::VersionMismatch { .. })
        ));

        let dup = manifest(&[
            record("1.1", "TCGA-LUAD", "SM", "01"),
            record("1.1", "TCGA-LUAD", "SM", "01"),
        ]);
        assert!(matches!(
            load_catalog_bytes(dup.as_bytes(), "idc_v11"),
            Err(CatalogError::DuplicateSop(_))
        ));
    }

    #[test]
    fn loading_same_bytes_gives_equal_catalogs() {
        let text = manifest(&[record("1.1", "TCGA-LUAD", "SM", "01")]);
        let a = load_catalog_bytes(text.as_bytes(), "idc_v11").unwrap();
        let b = load_catalog_bytes(text.as_bytes(), "idc_v11").unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.source_digest, b.source_digest);
    }

    #[test]
    fn figure_4_shaped_query() {
        let catalog = mixed_catalog();
        let expr = QueryExpr::and(vec![
            QueryExpr::eq("modality", "SM"),
            QueryExpr::is_in("collection_id", &["TCGA-LUAD", "TCGA-LUSC"]),
        ]);
        let result = query(&catalog, &expr, &SortSpec::by("sop_instance_uid")).unwrap();
        let sops: Vec<&str> = result.iter().map(|r| r.sop_instance_uid.as_str()).collect();
        assert_eq!(sops, ["1.1", "1.2", "1.3", "1.4"]);
    }

    #[test]
    fn not_exists_matches_everything() {
        let catalog = mixed_catalog();
        let expr = QueryExpr::Not {
            arg: Box::new(QueryExpr::Exists {
                attr: "nonexistent_key".into(),
            }),
        };
        let result = query(&catalog, &expr, &SortSpec::by("sop_instance_uid")).unwrap();
        assert_eq!(result.len(), catalog.records.len());
    }

    #[test]
    fn unknown_attribute_errors() {
        let catalog = mixed_catalog();
        let expr = QueryExpr::eq("no_such_column", "x");
        assert!(matches!(
            query(&catalog, &expr, &SortSpec::by("sop_instance_uid")),
            Err(CatalogError::UnknownAttribute(_))
        ));
        let sort = SortSpec::by("no_such_column");
        assert!(matches!(
            query(&catalog, &QueryExpr::eq("modality", "SM"), &sort),
            Err(CatalogError::UnknownAttribute(_))
        ));
        assert!(matches!(
            SortSpec::new(vec![]),
            Err(CatalogError::EmptySort)
        ));
    }

    #[test]
    fn monotone_filtering() {
        let catalog = mixed_catalog();
        let sort = SortSpec::by("sop_instance_uid");
        let broad = QueryExpr::eq("modality", "SM");
        let narrow = QueryExpr::and(vec![
            broad.clone(),
            QueryExpr::eq("collection_id", "TCGA-LUAD"),
        ]);
        let broad_set: BTreeSet<String> = query(&catalog, &broad, &sort)
            .unwrap()
            .into_iter()
            .map(|r| r.sop_instance_uid)
            .collect();
        let narrow_set: BTreeSet<String> = query(&catalog, &narrow, &sort)
            .unwrap()
            .into_iter()
            .map(|r| r.sop_instance_uid)
            .collect();
        assert!(narrow_set.is_subset(&broad_set));
    }

    #[test]
    fn query_results_serialize_identically_across_loads() {
        let text = manifest(&[
            record("1.2", "TCGA-LUAD", "SM", "01"),
            record("1.1", "TCGA-LUSC", "SM", "11"),
        ]);
        let sort = SortSpec {
            keys: vec![("collection_id".into(), SortDirection::Descending)],
        };
        let expr = QueryExpr::eq("modality", "SM");
        let render = |catalog: &Catalog| -> String {
            query(catalog, &expr, &sort)
                .unwrap()
                .iter()
                .map(|r| r.to_manifest_line())
                .collect::<Vec<_>>()
                .join("\n")
        };
        let a = render(&load_catalog_bytes(text.as_bytes(), "idc_v11").unwrap());
        let b = render(&load_catalog_bytes(text.as_bytes(), "idc_v11").unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn reference_class_rules() {
        let luad = derive_reference_class(&record("1", "TCGA-LUAD", "SM", "01")).unwrap();
        assert_eq!(luad.reference_class, Some(Class::Luad));
        let normal = derive_reference_class(&record("2", "TCGA-LUSC", "SM", "11")).unwrap();
        assert_eq!(normal.reference_class, Some(Class::Normal));
        let lscc = derive_reference_class(&record("3", "CPTAC-LSCC", "SM", "01")).unwrap();
        assert_eq!(lscc.reference_class, Some(Class::Lscc));

        let mut preset = record("4", "FOO-BAR", "SM", "");
        preset.reference_class = Some(Class::Luad);
        assert_eq!(
            derive_reference_class(&preset).unwrap().reference_class,
            Some(Class::Luad)
        );

        assert!(matches!(
            derive_reference_class(&record("5", "FOO-BAR", "SM", "")),
            Err(CatalogError::UnmappableRecord { .. })
        ));
    }

    #[test]
    fn summary_counts() {
        assert_eq!(cohort_summary(&[]).unwrap().total(), 0);
        let records: Vec<CatalogRecord> = vec![
            record("1", "TCGA-LUAD", "SM", "01"),
            record("2", "TCGA-LUAD", "SM", "11"),
            record("3", "TCGA-LUSC", "SM", "01"),
            record("4", "TCGA-LUSC", "SM", "11"),
            record("5", "TCGA-LUAD", "SM", "01"),
            record("6", "TCGA-LUSC", "SM", "01"),
        ]
        .into_iter()
        .map(|r| derive_reference_class(&r).unwrap())
        .collect();
        let summary = cohort_summary(&records).unwrap();
        assert_eq!((summary.normal, summary.luad, summary.lscc), (2, 2, 2));
        assert_eq!(summary.total(), 6);
    }

    fn classed_records(n_per_class: usize) -> Vec<CatalogRecord> {
        let mut out = Vec::new();
        for (collection, code) in [
            ("TCGA-LUAD", "01"),
            ("TCGA-LUSC", "01"),
            ("TCGA-LUAD", "11"),
        ] {
            for i in 0..n_per_class {
                let sop = format!("{collection}.{code}.{i:03}");
                out.push(derive_reference_class(&record(&sop, collection, "SM", code)).unwrap());
            }
        }
        out
    }

    #[test]
    fn stratified_subsample_counts_and_determinism() {
        let records = classed_records(10);
        let picked = subsample_stratified(&records, 3, 42).unwrap();
        assert_eq!(picked.len(), 9);
        let summary = cohort_summary(&picked).unwrap();
        assert_eq!((summary.normal, summary.luad, summary.lscc), (3, 3, 3));

        let again = subsample_stratified(&records, 3, 42).unwrap();
        assert_eq!(picked, again);

        let other_seed = subsample_stratified(&records, 3, 43).unwrap();
        assert_ne!(picked, other_seed);
    }

    #[test]
    fn stratified_subsample_ignores_input_order() {
        let mut records = classed_records(10);
        let picked = subsample_stratified(&records, 4, 7).unwrap();
        records.reverse();
        records.swap(0, 10);
        let permuted = subsample_stratified(&records, 4, 7).unwrap();
        assert_eq!(picked, permuted);
    }

    #[test]
    fn stratified_subsample_insufficient_class() {
        let records = classed_records(10);
        assert!(matches!(
            subsample_stratified(&records, 11, 42),
            Err(CatalogError::InsufficientClass {
                have: 10,
                need: 11,
                ..
            })
        ));
    }

    #[test]
    fn extra_attributes_are_queryable_and_sortable() {
        let mut a = record("1.1", "TCGA-LUAD", "SM", "01");
        a.extra.insert("tumor_stage".into(), "ii".into());
        let mut b = record("1.2", "TCGA-LUAD", "SM", "01");
        b.extra.insert("tumor_stage".into(), "ia".into());
        let c = record("1.3", "TCGA-LUAD", "SM", "01");
        let catalog = load_catalog_bytes(manifest(&[a, b, c]).as_bytes(), "idc_v11").unwrap();

        // Prefix over an extra key; records lacking it never match.
        let staged = query(
            &catalog,
            &QueryExpr::Prefix {
                attr: "tumor_stage".into(),
                value: "i".into(),
            },
            &SortSpec::by("sop_instance_uid"),
        )
        .unwrap();
        assert_eq!(staged.len(), 2);

        // Sorting by the extra key puts absent values first, then orders
        // lexicographically.
        let sorted = query(
            &catalog,
            &QueryExpr::eq("modality", "SM"),
            &SortSpec::by("tumor_stage"),
        )
        .unwrap();
        let sops: Vec<&str> = sorted.iter().map(|r| r.sop_instance_uid.as_str()).collect();
        assert_eq!(sops, ["1.3", "1.2", "1.1"]);

        // The extra key survives a manifest round trip.
        let reloaded = load_catalog_bytes(manifest(&sorted).as_bytes(), "idc_v11").unwrap();
        assert_eq!(reloaded.records[2].extra["tumor_stage"], "ii");
    }

    #[test]
    fn sql_rendering_matches_query_shape() {
        let expr = QueryExpr::and(vec![
            QueryExpr::eq("Modality", "SM"),
            QueryExpr::is_in("collection_id", &["TCGA-LUAD", "TCGA-LUSC"]),
        ]);
        let sql = expr.to_sql("idc_v11", &SortSpec::by("gcs_url"));
        assert_eq!(
            sql,
            "SELECT gcs_url, * FROM `bigquery-public-data.idc_v11.dicom_all` \
             WHERE (Modality = \"SM\") AND (collection_id IN (\"TCGA-LUAD\", \"TCGA-LUSC\")) \
             ORDER BY gcs_url ASC, sop_instance_uid ASC"
        );
    }
}
