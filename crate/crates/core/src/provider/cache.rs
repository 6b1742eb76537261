//! Content-addressed image cache.
//!
//! Layout: `<dir>/<cache-key>/image.json` plus backend artifacts beside
//! it. `image.json` is written last and acts as the commit marker, so a
//! crashed build is invisible and rebuilt on the next run. Build and hit
//! counts persist in `<dir>/stats.json` across processes.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::digest::Digest;
use crate::jsonutil::to_canonical_json;

use super::{ImageRef, ProviderError};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    /// Images built from scratch: one per distinct cache key, ever.
    pub builds: u64,
    /// Materialize calls served without building.
    pub hits: u64,
}

pub struct ImageCache {
    dir: PathBuf,
    lock: Mutex<()>,
}

impl ImageCache {
    pub fn open(dir: &Path) -> std::io::Result<ImageCache> {
        std::fs::create_dir_all(dir)?;
        Ok(ImageCache { dir: dir.to_path_buf(), lock: Mutex::new(()) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn stats(&self) -> CacheStats {
        read_stats(&self.dir)
    }

    /// Returns the committed image for a key, if any.
    pub fn lookup(&self, key: &Digest) -> Option<ImageRef> {
        let path = self.dir.join(key.as_str()).join("image.json");
        let text = std::fs::read_to_string(path).ok()?;
        serde_json::from_str(&text).ok()
    }

    /// Looks up `key`, building into the key's directory on a miss. The
    /// returned flag is true for a cache hit.
    pub fn get_or_build(
        &self,
        key: &Digest,
        build: impl FnOnce(&Path) -> Result<ImageRef, ProviderError>,
    ) -> Result<(ImageRef, bool), ProviderError> {
        let _guard = self.lock.lock().expect("cache lock poisoned");
        if let Some(image) = self.lookup(key) {
            self.bump(|s| s.hits += 1)?;
            return Ok((image, true));
        }
        let target = self.dir.join(key.as_str());
        std::fs::create_dir_all(&target)?;
        let image = match build(&target) {
            Ok(image) => image,
            Err(e) => {
                let _ = std::fs::remove_dir_all(&target);
                return Err(e);
            }
        };
        debug_assert_eq!(&image.cache_key, key);
        std::fs::write(
            target.join("image.json"),
            to_canonical_json(&image).expect("image ref serializes"),
        )?;
        self.bump(|s| s.builds += 1)?;
        Ok((image, false))
    }

    fn bump(&self, f: impl FnOnce(&mut CacheStats)) -> std::io::Result<()> {
        let mut stats = read_stats(&self.dir);
        f(&mut stats);
        std::fs::write(
            self.dir.join("stats.json"),
            to_canonical_json(&stats).expect("stats serialize"),
        )
    }
}

fn read_stats(dir: &Path) -> CacheStats {
    std::fs::read_to_string(dir.join("stats.json"))
        .ok()
        .and_then(|text| serde_json::from_str(&text).ok())
        .unwrap_or_default()
}
