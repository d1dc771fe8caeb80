//! Shared fixtures for the integration and acceptance suites: a loopback
//! S3-style object server and a synthetic slide corpus builder.

#![allow(dead_code)]

use std::collections::HashMap;
use std::io::{Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;
use wsirepro_core::catalog::CatalogRecord;
use wsirepro_core::class::Class;
use wsirepro_core::dicom::{write_synthetic_wsi, FillPattern, FixtureSpec, FrameFill};

/// Serves a fixed object map over HTTP/1.1 GET with `Range` support on a
/// loopback port. Returns the `host:port` endpoint. The server thread runs
/// for the remainder of the test process.
pub struct LoopbackServer {
    pub endpoint: String,
    /// Responds 500 to this many requests before serving normally.
    fail_budget: Arc<AtomicU32>,
}

impl LoopbackServer {
    pub fn start(objects: HashMap<String, Vec<u8>>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind loopback");
        let endpoint = format!("127.0.0.1:{}", listener.local_addr().unwrap().port());
        let fail_budget = Arc::new(AtomicU32::new(0));
        let budget = fail_budget.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let objects = objects.clone();
                let budget = budget.clone();
                std::thread::spawn(move || {
                    let _ = serve_one(&mut stream, &objects, &budget);
                });
            }
        });
        Self {
            endpoint,
            fail_budget,
        }
    }

    /// Make the next `n` requests fail with HTTP 500.
    pub fn fail_next(&self, n: u32) {
        self.fail_budget.store(n, Ordering::SeqCst);
    }
}

fn serve_one(
    stream: &mut std::net::TcpStream,
    objects: &HashMap<String, Vec<u8>>,
    fail_budget: &AtomicU32,
) -> std::io::Result<()> {
    let mut raw = Vec::new();
    let mut buf = [0u8; 4096];
    loop {
        let n = stream.read(&mut buf)?;
        if n == 0 {
            return Ok(());
        }
        raw.extend_from_slice(&buf[..n]);
        if raw.windows(4).any(|w| w == b"\r\n\r\n") {
            break;
        }
    }
    let text = String::from_utf8_lossy(&raw);
    let mut lines = text.split("\r\n");
    let request_line = lines.next().unwrap_or_default();
    let path = request_line
        .split_whitespace()
        .nth(1)
        .unwrap_or("/")
        .to_string();
    let range = lines
        .filter_map(|l| l.strip_prefix("Range: bytes="))
        .next()
        .and_then(|spec| {
            let (a, b) = spec.split_once('-')?;
            Some((a.parse::<u64>().ok()?, b.parse::<u64>().ok()?))
        });

    if fail_budget
        .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |v| v.checked_sub(1))
        .is_ok()
    {
        return respond(stream, 500, "Internal Server Error", &[], b"boom");
    }

    let Some(body) = objects.get(&path) else {
        return respond(stream, 404, "Not Found", &[], b"no such object");
    };
    match range {
        None => respond(stream, 200, "OK", &[], body),
        Some((start, end)) => {
            if start >= body.len() as u64 {
                let header = format!("Content-Range: bytes */{}", body.len());
                return respond(stream, 416, "Range Not Satisfiable", &[&header], b"");
            }
            let end = end.min(body.len() as u64 - 1);
            let slice = &body[start as usize..=end as usize];
            let header = format!("Content-Range: bytes {start}-{end}/{}", body.len());
            respond(stream, 206, "Partial Content", &[&header], slice)
        }
    }
}

fn respond(
    stream: &mut std::net::TcpStream,
    status: u16,
    reason: &str,
    extra_headers: &[&str],
    body: &[u8],
) -> std::io::Result<()> {
    let mut head = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Length: {}\r\nConnection: close\r\n",
        body.len()
    );
    for header in extra_headers {
        head.push_str(header);
        head.push_str("\r\n");
    }
    head.push_str("\r\n");
    stream.write_all(head.as_bytes())?;
    stream.write_all(body)?;
    stream.flush()
}

/// Per-class tissue color used by separable fixtures: distinct hues, all
/// clearly below the background cutoff in at least one channel.
pub fn class_color(class: Class) -> [u8; 3] {
    match class {
        Class::Normal => [190, 60, 60],
        Class::Luad => [60, 190, 60],
        Class::Lscc => [60, 60, 190],
    }
}

/// One synthetic slide: geometry, identity and per-frame tissue layout.
pub struct SlideFixture {
    pub sop_instance_uid: String,
    pub series_instance_uid: String,
    pub patient_id: String,
    pub class: Class,
    /// Frames carrying tissue (class-colored); the rest are white.
    pub tissue_frames: Vec<u32>,
}

impl SlideFixture {
    pub fn new(name: &str, patient: &str, class: Class, tissue_frames: &[u32]) -> Self {
        Self {
            sop_instance_uid: format!("1.2.826.0.1.3680043.10.1337.9.{name}"),
            series_instance_uid: format!("1.2.826.0.1.3680043.10.1337.8.{name}"),
            patient_id: patient.to_string(),
            class,
            tissue_frames: tissue_frames.to_vec(),
        }
    }

    pub fn spec(&self) -> FixtureSpec {
        let mut spec = FixtureSpec::new(1024, 768, 256, 256);
        let mut fills = vec![FrameFill::White; 12];
        for &frame in &self.tissue_frames {
            fills[frame as usize] = FrameFill::Rgb(class_color(self.class));
        }
        spec.fill = FillPattern::Frames(fills);
        spec.patient_id = Some(self.patient_id.clone());
        spec.sop_instance_uid = Some(self.sop_instance_uid.clone());
        spec.series_instance_uid = Some(self.series_instance_uid.clone());
        spec
    }
}

/// Writes every slide to `dir` and a catalog manifest referencing them with
/// `local://` URLs. Returns the manifest path.
pub fn write_corpus(dir: &Path, version: &str, slides: &[SlideFixture]) -> std::path::PathBuf {
    let mut manifest = format!("#catalog-version:{version}\n");
    for slide in slides {
        let bytes = write_synthetic_wsi(&slide.spec()).expect("fixture writes");
        let file = dir.join(format!("{}.dcm", slide.sop_instance_uid));
        std::fs::write(&file, bytes).expect("fixture file");
        let record = CatalogRecord {
            collection_id: match slide.class {
                Class::Luad => "TCGA-LUAD".into(),
                Class::Lscc => "TCGA-LUSC".into(),
                Class::Normal => "TCGA-LUAD".into(),
            },
            patient_id: slide.patient_id.clone(),
            study_instance_uid: format!("{}.st", slide.series_instance_uid),
            series_instance_uid: slide.series_instance_uid.clone(),
            sop_instance_uid: slide.sop_instance_uid.clone(),
            modality: "SM".into(),
            image_type_flavor: "VOLUME".into(),
            sample_type_code: if slide.class == Class::Normal {
                "11"
            } else {
                "01"
            }
            .into(),
            reference_class: Some(slide.class),
            pixel_spacing_mm: 0.001,
            gcs_url: format!("local://{}", file.display()),
            extra: Default::default(),
        };
        manifest.push_str(&record.to_manifest_line());
        manifest.push('\n');
    }
    let path = dir.join("catalog.manifest");
    std::fs::write(&path, manifest).expect("manifest file");
    path
}

/// The miniature training-experiment corpus: 12 slides over 4 patients, each
/// patient contributing one slide of every class, so any patient-level split
/// covers all classes in every subset.
pub fn mini_experiment1_corpus() -> Vec<SlideFixture> {
    let mut slides = Vec::new();
    for (p, patient) in ["PAT-A", "PAT-B", "PAT-C", "PAT-D"].iter().enumerate() {
        for class in Class::ALL {
            // Between 4 and 7 tissue frames at varying positions.
            let count = 4 + (p + class.index()) % 4;
            let frames: Vec<u32> = (0..count as u32).map(|k| (k * 3 + p as u32) % 12).collect();
            let mut unique = frames;
            unique.sort_unstable();
            unique.dedup();
            slides.push(SlideFixture::new(
                &format!("e1.{p}.{}", class.index()),
                patient,
                class,
                &unique,
            ));
        }
    }
    slides
}

/// The miniature inference-experiment corpus: 9 slides, 9 distinct patients.
pub fn mini_experiment2_corpus() -> Vec<SlideFixture> {
    let mut slides = Vec::new();
    let mut patient = 0;
    for class in Class::ALL {
        for i in 0..3u32 {
            patient += 1;
            let frames: Vec<u32> = (0..5).map(|k| (k * 2 + i) % 12).collect();
            let mut unique = frames;
            unique.sort_unstable();
            unique.dedup();
            slides.push(SlideFixture::new(
                &format!("e2.{}.{i}", class.index()),
                &format!("PAT-X{patient}"),
                class,
                &unique,
            ));
        }
    }
    slides
}

/// A hand-built reference model that separates the class colors: each class
/// row rewards its own channel mean and penalizes the others.
pub fn color_separating_model() -> wsirepro_core::classifier::ReferenceModel {
    let mut model = wsirepro_core::classifier::ReferenceModel::zeros();
    for class in Class::ALL {
        for channel in 0..3 {
            model.weights[class.index()][channel] =
                if channel == class.index() { 12.0 } else { -6.0 };
        }
    }
    model
}
