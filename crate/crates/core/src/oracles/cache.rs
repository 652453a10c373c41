use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ImageHandle;

/// Content-addressed store for generated images: `<dir>/gen/<sha>.bin` plus a
/// `<sha>.json` metadata record, and a `(prompt, seed)` index so repeat
/// generations are served from disk.
#[derive(Debug, Clone)]
pub struct ImageCache {
    root: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheMeta {
    handle: String,
    prompt: String,
    seed: u64,
    bytes: usize,
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl ImageCache {
    pub fn new(cache_dir: impl AsRef<Path>) -> Self {
        ImageCache {
            root: cache_dir.as_ref().join("gen"),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.root
    }

    fn key(prompt: &str, seed: u64) -> String {
        sha256_hex(format!("{seed}\u{0}{prompt}").as_bytes())
    }

    pub fn lookup(&self, prompt: &str, seed: u64) -> Option<ImageHandle> {
        let key = self.root.join("keys").join(Self::key(prompt, seed));
        let handle = fs::read_to_string(key).ok()?;
        let handle = ImageHandle(handle.trim().to_string());
        self.root
            .join(format!("{handle}.bin"))
            .exists()
            .then_some(handle)
    }

    pub fn put(&self, bytes: &[u8], prompt: &str, seed: u64) -> std::io::Result<ImageHandle> {
        let handle = ImageHandle(sha256_hex(bytes));
        fs::create_dir_all(self.root.join("keys"))?;
        let bin = self.root.join(format!("{handle}.bin"));
        if !bin.exists() {
            let tmp = self.root.join(format!("{handle}.bin.tmp"));
            fs::write(&tmp, bytes)?;
            fs::rename(&tmp, &bin)?;
        }
        let meta = CacheMeta {
            handle: handle.0.clone(),
            prompt: prompt.to_string(),
            seed,
            bytes: bytes.len(),
        };
        fs::write(
            self.root.join(format!("{handle}.json")),
            serde_json::to_vec(&meta).expect("metadata serializes"),
        )?;
        fs::write(self.root.join("keys").join(Self::key(prompt, seed)), &handle.0)?;
        Ok(handle)
    }

    pub fn get(&self, handle: &ImageHandle) -> Option<Vec<u8>> {
        let h = handle.as_str();
        if h.is_empty() || !h.chars().all(|c| c.is_ascii_hexdigit()) {
            return None;
        }
        fs::read(self.root.join(format!("{h}.bin"))).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn put_is_content_addressed_and_indexed() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ImageCache::new(dir.path());
        let h = cache.put(b"pixels", "a red cube", 4).unwrap();
        assert_eq!(h.as_str().len(), 64);
        assert_eq!(cache.get(&h).unwrap(), b"pixels");
        assert_eq!(cache.lookup("a red cube", 4), Some(h.clone()));
        assert_eq!(cache.lookup("a red cube", 5), None);
        assert!(cache.get(&ImageHandle("../etc".into())).is_none());
        assert!(dir.path().join("gen").join(format!("{h}.json")).exists());
    }
}
