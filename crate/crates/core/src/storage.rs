//! Object fetch from local or S3-compatible backends, plus the on-disk PNG
//! tile cache used by precache mode.
//!
//! Remote access is deliberately minimal: unauthenticated HTTP GET with an
//! optional `Range` header, which is all the public IDC-style buckets need.

mod cache;
mod http;

pub use cache::{CachedTile, TileCache, TileCacheKey};

use crate::catalog::CatalogRecord;
use std::path::PathBuf;
use std::time::Duration;
use thiserror::Error;

/// Default public endpoint substituted for `gs://` URLs.
pub const DEFAULT_GS_ENDPOINT: &str = "storage.googleapis.com";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UrlScheme {
    Local,
    S3Http,
}

/// A resolved object location.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectUrl {
    pub scheme: UrlScheme,
    /// `host[:port]`; empty for local objects.
    pub endpoint: String,
    pub bucket: String,
    /// Object key, or the filesystem path for local objects.
    pub key: String,
}

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("unparseable object url {0:?}")]
    UnparseableUrl(String),
    #[error("object not found: {0}")]
    NotFound(String),
    #[error("range {offset}+{length} unsatisfiable for object of {available} bytes")]
    RangeUnsatisfiable {
        offset: u64,
        length: u64,
        available: u64,
    },
    #[error("transport failure after {attempts} attempts: {detail}")]
    TransportError { attempts: u32, detail: String },
    #[error("cache i/o at {path}: {source}")]
    CacheIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Parses a catalog `gcs_url` into an [`ObjectUrl`].
///
/// Accepted grammars: `gs://<bucket>/<key>` (mapped to the configured public
/// endpoint), `s3http://<endpoint>/<bucket>/<key>`, and `local://<path>`.
pub fn resolve_gcs_url(
    record: &CatalogRecord,
    gs_endpoint: &str,
) -> Result<ObjectUrl, StorageError> {
    parse_object_url(&record.gcs_url, gs_endpoint)
}

pub fn parse_object_url(url: &str, gs_endpoint: &str) -> Result<ObjectUrl, StorageError> {
    let unparseable = || StorageError::UnparseableUrl(url.to_string());
    if let Some(rest) = url.strip_prefix("gs://") {
        let (bucket, key) = rest.split_once('/').ok_or_else(unparseable)?;
        if bucket.is_empty() || key.is_empty() {
            return Err(unparseable());
        }
        return Ok(ObjectUrl {
            scheme: UrlScheme::S3Http,
            endpoint: gs_endpoint.to_string(),
            bucket: bucket.to_string(),
            key: key.to_string(),
        });
    }
    if let Some(rest) = url.strip_prefix("s3http://") {
        let mut parts = rest.splitn(3, '/');
        let endpoint = parts
            .next()
            .filter(|s| !s.is_empty())
            .ok_or_else(unparseable)?;
        let bucket = parts
            .next()
            .filter(|s| !s.is_empty())
            .ok_or_else(unparseable)?;
        let key = parts
            .next()
            .filter(|s| !s.is_empty())
            .ok_or_else(unparseable)?;
        return Ok(ObjectUrl {
            scheme: UrlScheme::S3Http,
            endpoint: endpoint.to_string(),
            bucket: bucket.to_string(),
            key: key.to_string(),
        });
    }
    if let Some(path) = url.strip_prefix("local://") {
        if path.is_empty() {
            return Err(unparseable());
        }
        return Ok(ObjectUrl {
            scheme: UrlScheme::Local,
            endpoint: String::new(),
            bucket: String::new(),
            key: path.to_string(),
        });
    }
    Err(unparseable())
}

/// Retry behavior for transient transport failures.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
    pub backoff_factor: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(250),
            backoff_factor: 4,
        }
    }
}

impl RetryPolicy {
    /// No sleeping between attempts; for tests.
    pub fn immediate(attempts: u32) -> Self {
        Self {
            attempts,
            base_delay: Duration::ZERO,
            backoff_factor: 1,
        }
    }

    fn delay(&self, attempt: u32) -> Duration {
        self.base_delay * self.backoff_factor.saturating_pow(attempt)
    }
}

/// Fetches an object, optionally a byte range `(offset, length)`.
///
/// Full-object fetch when `range` is `None`. A backend without ranged reads
/// degrades to a full fetch plus slice, so callers always get exactly the
/// requested bytes. Transient transport failures are retried per `retry`;
/// `NotFound` and `RangeUnsatisfiable` are final.
pub fn fetch_object(
    url: &ObjectUrl,
    range: Option<(u64, u64)>,
    retry: &RetryPolicy,
) -> Result<Vec<u8>, StorageError> {
    match url.scheme {
        UrlScheme::Local => fetch_local(url, range),
        UrlScheme::S3Http => fetch_s3http(url, range, retry),
    }
}

fn slice_range(bytes: Vec<u8>, range: Option<(u64, u64)>) -> Result<Vec<u8>, StorageError> {
    match range {
        None => Ok(bytes),
        Some((offset, length)) => {
            let end = offset.checked_add(length);
            match end {
                Some(end) if end <= bytes.len() as u64 => {
                    Ok(bytes[offset as usize..end as usize].to_vec())
                }
                _ => Err(StorageError::RangeUnsatisfiable {
                    offset,
                    length,
                    available: bytes.len() as u64,
                }),
            }
        }
    }
}

fn fetch_local(url: &ObjectUrl, range: Option<(u64, u64)>) -> Result<Vec<u8>, StorageError> {
    let bytes = std::fs::read(&url.key).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => StorageError::NotFound(url.key.clone()),
        _ => StorageError::TransportError {
            attempts: 1,
            detail: format!("reading {}: {e}", url.key),
        },
    })?;
    slice_range(bytes, range)
}

fn fetch_s3http(
    url: &ObjectUrl,
    range: Option<(u64, u64)>,
    retry: &RetryPolicy,
) -> Result<Vec<u8>, StorageError> {
    let path = format!("/{}/{}", url.bucket, url.key);
    let mut last_error = String::new();
    for attempt in 0..retry.attempts {
        if attempt > 0 {
            std::thread::sleep(retry.delay(attempt - 1));
        }
        match http::get(&url.endpoint, &path, range) {
            Ok(response) => match response.status {
                200 => return slice_range(response.body, range),
                206 => {
                    // Partial content: the server honored the range.
                    let (offset, length) = range.unwrap_or((0, response.body.len() as u64));
                    if response.body.len() as u64 != length {
                        return Err(StorageError::TransportError {
                            attempts: attempt + 1,
                            detail: format!(
                                "server returned {} bytes for a {length}-byte range at {offset}",
                                response.body.len()
                            ),
                        });
                    }
                    return Ok(response.body);
                }
                404 => return Err(StorageError::NotFound(format!("{}{path}", url.endpoint))),
                416 => {
                    let (offset, length) = range.unwrap_or((0, 0));
                    return Err(StorageError::RangeUnsatisfiable {
                        offset,
                        length,
                        available: response.content_range_total().unwrap_or(0),
                    });
                }
                status => {
                    last_error = format!("HTTP {status}");
                    if !(500..600).contains(&status) {
                        // Unexpected but final.
                        return Err(StorageError::TransportError {
                            attempts: attempt + 1,
                            detail: last_error,
                        });
                    }
                }
            },
            Err(e) => last_error = e.to_string(),
        }
    }
    Err(StorageError::TransportError {
        attempts: retry.attempts,
        detail: last_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::CatalogRecord;
    use std::collections::BTreeMap;

    fn record_with_url(url: &str) -> CatalogRecord {
        CatalogRecord {
            collection_id: String::new(),
            patient_id: String::new(),
            study_instance_uid: String::new(),
            series_instance_uid: String::new(),
            sop_instance_uid: "1".into(),
            modality: "SM".into(),
            image_type_flavor: "VOLUME".into(),
            sample_type_code: String::new(),
            reference_class: None,
            pixel_spacing_mm: 0.001,
            gcs_url: url.into(),
            extra: BTreeMap::new(),
        }
    }

    #[test]
    fn gs_urls_map_to_the_configured_endpoint() {
        let url =
            resolve_gcs_url(&record_with_url("gs://idc-open/abc.dcm"), "endpoint:9000").unwrap();
        assert_eq!(url.scheme, UrlScheme::S3Http);
        assert_eq!(url.endpoint, "endpoint:9000");
        assert_eq!(url.bucket, "idc-open");
        assert_eq!(url.key, "abc.dcm");
    }

    #[test]
    fn s3http_and_local_urls_parse() {
        let url = parse_object_url("s3http://127.0.0.1:8080/bkt/a/b.dcm", "unused").unwrap();
        assert_eq!(url.endpoint, "127.0.0.1:8080");
        assert_eq!(url.bucket, "bkt");
        assert_eq!(url.key, "a/b.dcm");

        let url = parse_object_url("local:///tmp/f.dcm", "unused").unwrap();
        assert_eq!(url.scheme, UrlScheme::Local);
        assert_eq!(url.key, "/tmp/f.dcm");
    }

    #[test]
    fn unknown_schemes_are_unparseable() {
        for bad in [
            "ftp://x",
            "gs://nokeypart",
            "s3http://host/bucketonly",
            "local://",
            "",
        ] {
            assert!(
                matches!(
                    parse_object_url(bad, "e"),
                    Err(StorageError::UnparseableUrl(_))
                ),
                "{bad:?} should not parse"
            );
        }
    }

    #[test]
    fn local_fetch_slices_ranges() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obj.bin");
        let data: Vec<u8> = (0..100).collect();
        std::fs::write(&path, &data).unwrap();
        let url = parse_object_url(&format!("local://{}", path.display()), "e").unwrap();

        let retry = RetryPolicy::immediate(1);
        assert_eq!(fetch_object(&url, None, &retry).unwrap(), data);
        assert_eq!(
            fetch_object(&url, Some((10, 20)), &retry).unwrap(),
            &data[10..30]
        );
        assert!(matches!(
            fetch_object(&url, Some((95, 20)), &retry),
            Err(StorageError::RangeUnsatisfiable { available: 100, .. })
        ));
    }

    #[test]
    fn missing_local_object_is_not_found() {
        let url = parse_object_url("local:///nonexistent/path/x.dcm", "e").unwrap();
        assert!(matches!(
            fetch_object(&url, None, &RetryPolicy::immediate(1)),
            Err(StorageError::NotFound(_))
        ));
    }

    #[test]
    fn ranged_fetches_compose_to_the_full_object() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obj.bin");
        let data: Vec<u8> = (0u16..1000).map(|i| (i % 251) as u8).collect();
        std::fs::write(&path, &data).unwrap();
        let url = parse_object_url(&format!("local://{}", path.display()), "e").unwrap();
        let retry = RetryPolicy::immediate(1);

        let mut stitched = Vec::new();
        for chunk_start in (0..1000).step_by(167) {
            let len = 167.min(1000 - chunk_start);
            stitched.extend(
                fetch_object(&url, Some((chunk_start as u64, len as u64)), &retry).unwrap(),
            );
        }
        assert_eq!(stitched, fetch_object(&url, None, &retry).unwrap());
    }

    #[test]
    fn refused_connection_exhausts_retries() {
        // Port 1 on localhost is essentially guaranteed closed.
        let url = parse_object_url("s3http://127.0.0.1:1/bkt/key", "e").unwrap();
        match fetch_object(&url, None, &RetryPolicy::immediate(3)) {
            Err(StorageError::TransportError { attempts: 3, .. }) => {}
            other => panic!("expected TransportError after 3 attempts, got {other:?}"),
        }
    }
}
