//! On-disk PNG tile cache.
//!
//! Layout: `<root>/<sop_instance_uid>/<params_digest>/<tile_index>.png`.
//! Entries are lossless RGB8, so cache use cannot perturb downstream
//! classification. Writes go through a temp file plus rename, so a killed
//! writer never leaves a readable partial entry; concurrent writers race
//! benignly because entries are content-deterministic (last writer wins).

use super::StorageError;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

/// Identifies one cached tile. `params_digest` must cover every tiling
/// parameter that influences tile pixels or selection, so entries are
/// invalidated by parameter changes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileCacheKey {
    pub sop_instance_uid: String,
    pub tile_index: u32,
    pub params_digest: String,
}

/// A decoded cache entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CachedTile {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct TileCache {
    root: PathBuf,
}

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl TileCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn entry_dir(&self, key: &TileCacheKey) -> PathBuf {
        self.root
            .join(&key.sop_instance_uid)
            .join(&key.params_digest)
    }

    fn entry_path(&self, key: &TileCacheKey) -> PathBuf {
        self.entry_dir(key).join(format!("{}.png", key.tile_index))
    }

    /// Stores a tile atomically (temp file + rename).
    pub fn put(&self, key: &TileCacheKey, tile: &CachedTile) -> Result<(), StorageError> {
        assert_eq!(
            tile.pixels.len(),
            tile.width as usize * tile.height as usize * 3,
            "pixel buffer does not match dimensions"
        );
        let dir = self.entry_dir(key);
        let io_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source: std::io::Error| StorageError::CacheIo { path, source }
        };
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;

        let temp_path = dir.join(format!(
            ".{}.png.tmp-{}-{}",
            key.tile_index,
            std::process::id(),
            TEMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        {
            let file = std::fs::File::create(&temp_path).map_err(io_err(&temp_path))?;
            let mut encoder = png::Encoder::new(BufWriter::new(file), tile.width, tile.height);
            encoder.set_color(png::ColorType::Rgb);
            encoder.set_depth(png::BitDepth::Eight);
            let mut writer = encoder.write_header().map_err(|e| png_err(&temp_path, e))?;
            writer
                .write_image_data(&tile.pixels)
                .map_err(|e| png_err(&temp_path, e))?;
        }
        let final_path = self.entry_path(key);
        std::fs::rename(&temp_path, &final_path).map_err(io_err(&final_path))?;
        Ok(())
    }

    /// Fetches a tile. Returns `Ok(None)` on a cold entry; a corrupt entry
    /// (decode failure, wrong geometry) is deleted and also treated as a miss.
    pub fn get(&self, key: &TileCacheKey) -> Result<Option<CachedTile>, StorageError> {
        let path = self.entry_path(key);
        let file = match std::fs::File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(source) => return Err(StorageError::CacheIo { path, source }),
        };
        match decode_png(file) {
            Ok(tile) => Ok(Some(tile)),
            Err(_) => {
                match std::fs::remove_file(&path) {
                    Ok(()) => {}
                    Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                    Err(source) => return Err(StorageError::CacheIo { path, source }),
                }
                Ok(None)
            }
        }
    }
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> StorageError {
    StorageError::CacheIo {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()),
    }
}

fn decode_png(file: std::fs::File) -> Result<CachedTile, String> {
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or("png too large")?];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(format!(
            "unexpected pixel format {:?}/{:?}",
            info.color_type, info.bit_depth
        ));
    }
    buf.truncate(info.buffer_size());
    Ok(CachedTile {
        width: info.width,
        height: info.height,
        pixels: buf,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(index: u32, digest: &str) -> TileCacheKey {
        TileCacheKey {
            sop_instance_uid: "1.2.3".into(),
            tile_index: index,
            params_digest: digest.into(),
        }
    }

    fn gradient_tile() -> CachedTile {
        let mut pixels = Vec::with_capacity(16 * 16 * 3);
        for y in 0..16u32 {
            for x in 0..16u32 {
                pixels.extend_from_slice(&[(x * 16) as u8, (y * 16) as u8, ((x + y) * 8) as u8]);
            }
        }
        CachedTile {
            width: 16,
            height: 16,
            pixels,
        }
    }

    #[test]
    fn put_then_get_is_pixel_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cache = TileCache::new(dir.path());
        let tile = gradient_tile();
        cache.put(&key(3, "abc123"), &tile).unwrap();
        let loaded = cache.get(&key(3, "abc123")).unwrap().unwrap();
        assert_eq!(loaded, tile);
    }

    #[test]
    fn cold_cache_misses() {
        let dir = tempfile::tempdir().unwrap();
        let cache = TileCache::new(dir.path());
        assert!(cache.get(&key(0, "abc")).unwrap().is_none());
    }

    #[test]
    fn params_digest_isolates_entries() {
        let dir = tempfile::tempdir().unwrap();
        let cache = TileCache::new(dir.path());
        cache.put(&key(5, "digest-a"), &gradient_tile()).unwrap();
        assert!(cache.get(&key(5, "digest-b")).unwrap().is_none());
    }

    #[test]
    fn corrupt_entries_are_deleted_and_miss() {
        let dir = tempfile::tempdir().unwrap();
        let cache = TileCache::new(dir.path());
        let k = key(7, "abc");
        cache.put(&k, &gradient_tile()).unwrap();
        let path = cache.entry_path(&k);
        std::fs::write(&path, b"not a png").unwrap();
        assert!(cache.get(&k).unwrap().is_none());
        assert!(!path.exists(), "corrupt entry should be removed");
    }

    #[test]
    fn no_temp_files_remain_after_put() {
        let dir = tempfile::tempdir().unwrap();
        let cache = TileCache::new(dir.path());
        let k = key(1, "abc");
        cache.put(&k, &gradient_tile()).unwrap();
        let entries: Vec<_> = std::fs::read_dir(cache.entry_dir(&k))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert_eq!(entries, vec!["1.png"]);
    }
}
