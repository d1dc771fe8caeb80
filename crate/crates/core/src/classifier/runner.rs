//! Wire protocol for external model runners.
//!
//! A runner is a subprocess speaking a little-endian framed protocol on its
//! standard streams:
//!
//! * handshake: `WSR1` + u32 protocol version (1) → `WSA1` + u32 class count (3)
//! * per batch: `TILB` + u32 batch + u16 height + u16 width + u8 channels +
//!   raw RGB bytes → `PRBB` + u32 batch + f32 probabilities (batch × 3, row-major)
//!
//! Any other magic is a protocol violation. Returned vectors are
//! re-normalized when their sum is within 1e-3 of 1 and rejected otherwise.

use super::{ClassProbabilities, ClassifierError, NUM_CLASSES};
use crate::tiling::TileImage;
use std::io::{Read, Write};
use std::process::{Child, Command, Stdio};

pub const PROTOCOL_VERSION: u32 = 1;
const MAGIC_HANDSHAKE_REQUEST: &[u8; 4] = b"WSR1";
const MAGIC_HANDSHAKE_RESPONSE: &[u8; 4] = b"WSA1";
const MAGIC_TILE_BATCH: &[u8; 4] = b"TILB";
const MAGIC_PROBABILITIES: &[u8; 4] = b"PRBB";

/// Connection to one external runner; serves one in-flight batch at a time.
pub struct ExternalRunner {
    reader: Box<dyn Read + Send>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
    handshaken: bool,
    completed: usize,
}

impl ExternalRunner {
    /// Spawns `program args…` with piped standard streams.
    pub fn spawn(program: &str, args: &[String]) -> Result<Self, ClassifierError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| ClassifierError::RunnerCrashed {
                completed: 0,
                detail: format!("spawn {program:?}: {e}"),
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Ok(Self {
            reader: Box::new(stdout),
            writer: Box::new(stdin),
            child: Some(child),
            handshaken: false,
            completed: 0,
        })
    }

    /// Wraps an already-connected byte stream pair (used by in-process test
    /// doubles).
    pub fn from_streams(
        reader: impl Read + Send + 'static,
        writer: impl Write + Send + 'static,
    ) -> Self {
        Self {
            reader: Box::new(reader),
            writer: Box::new(writer),
            child: None,
            handshaken: false,
            completed: 0,
        }
    }

    /// Tiles classified successfully over the connection's lifetime.
    pub fn completed(&self) -> usize {
        self.completed
    }

    fn crashed(&self, detail: impl Into<String>) -> ClassifierError {
        ClassifierError::RunnerCrashed {
            completed: self.completed,
            detail: detail.into(),
        }
    }

    fn send(&mut self, bytes: &[u8]) -> Result<(), ClassifierError> {
        self.writer
            .write_all(bytes)
            .and_then(|_| self.writer.flush())
            .map_err(|e| self.crashed(e.to_string()))
    }

    fn recv_exact(&mut self, buf: &mut [u8]) -> Result<(), ClassifierError> {
        self.reader
            .read_exact(buf)
            .map_err(|e| self.crashed(e.to_string()))
    }

    pub fn handshake(&mut self) -> Result<(), ClassifierError> {
        let mut request = Vec::with_capacity(8);
        request.extend_from_slice(MAGIC_HANDSHAKE_REQUEST);
        request.extend_from_slice(&PROTOCOL_VERSION.to_le_bytes());
        self.send(&request)?;

        let mut magic = [0u8; 4];
        self.recv_exact(&mut magic)?;
        if &magic != MAGIC_HANDSHAKE_RESPONSE {
            return Err(ClassifierError::ProtocolViolation(format!(
                "handshake response magic {magic:?}"
            )));
        }
        let mut classes = [0u8; 4];
        self.recv_exact(&mut classes)?;
        let num_classes = u32::from_le_bytes(classes);
        if num_classes != NUM_CLASSES as u32 {
            return Err(ClassifierError::ProtocolViolation(format!(
                "runner serves {num_classes} classes, need {NUM_CLASSES}"
            )));
        }
        self.handshaken = true;
        Ok(())
    }

    /// Sends one batch and reads back one probability vector per tile,
    /// order-preserving.
    pub fn classify_batch(
        &mut self,
        tiles: &[TileImage],
    ) -> Result<Vec<ClassProbabilities>, ClassifierError> {
        if !self.handshaken {
            self.handshake()?;
        }
        if tiles.is_empty() {
            return Ok(Vec::new());
        }
        let side = tiles[0].tile_px;
        if tiles.iter().any(|t| t.tile_px != side) {
            return Err(ClassifierError::ProtocolViolation(
                "tiles in one batch must share dimensions".into(),
            ));
        }

        let mut frame = Vec::with_capacity(13 + tiles.len() * (side * side * 3) as usize);
        frame.extend_from_slice(MAGIC_TILE_BATCH);
        frame.extend_from_slice(&(tiles.len() as u32).to_le_bytes());
        frame.extend_from_slice(&(side as u16).to_le_bytes());
        frame.extend_from_slice(&(side as u16).to_le_bytes());
        frame.push(3);
        for tile in tiles {
            frame.extend_from_slice(&tile.pixels);
        }
        self.send(&frame)?;

        let mut magic = [0u8; 4];
        self.recv_exact(&mut magic)?;
        if &magic != MAGIC_PROBABILITIES {
            return Err(ClassifierError::ProtocolViolation(format!(
                "batch response magic {magic:?}"
            )));
        }
        let mut count_buf = [0u8; 4];
        self.recv_exact(&mut count_buf)?;
        let count = u32::from_le_bytes(count_buf) as usize;
        if count != tiles.len() {
            return Err(ClassifierError::ProtocolViolation(format!(
                "runner answered {count} tiles for a batch of {}",
                tiles.len()
            )));
        }

        let mut payload = vec![0u8; count * NUM_CLASSES * 4];
        self.recv_exact(&mut payload)?;
        let mut out = Vec::with_capacity(count);
        for (i, row) in payload.chunks_exact(NUM_CLASSES * 4).enumerate() {
            let mut p = [0.0f64; NUM_CLASSES];
            for (c, chunk) in row.chunks_exact(4).enumerate() {
                p[c] = f64::from(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
            }
            out.push(normalize_probabilities(p, i)?);
            self.completed += 1;
        }
        Ok(out)
    }
}

/// Accepts vectors whose sum is within 1e-3 of 1 (measurement noise from
/// f32 transport) and re-normalizes them exactly; anything else is rejected.
fn normalize_probabilities(
    p: [f64; NUM_CLASSES],
    index: usize,
) -> Result<ClassProbabilities, ClassifierError> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) || (sum - 1.0).abs() > 1e-3 {
        return Err(ClassifierError::NonProbabilisticOutput {
            detail: format!("tile {index}: {p:?} (sum {sum})"),
        });
    }
    Ok(ClassProbabilities([p[0] / sum, p[1] / sum, p[2] / sum]))
}

/// Classifies a batch through a runner, completing the handshake first if
/// needed.
pub fn classify_external(
    runner: &mut ExternalRunner,
    tiles: &[TileImage],
) -> Result<Vec<ClassProbabilities>, ClassifierError> {
    runner.classify_batch(tiles)
}

impl Drop for ExternalRunner {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}
