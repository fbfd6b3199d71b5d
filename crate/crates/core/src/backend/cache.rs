use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendError, ChatBackend, ChatTurn};

/// SHA-256 over model name, temperature and the full turn list.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey(String);

impl CacheKey {
    pub fn new(model_name: &str, temperature: f64, turns: &[ChatTurn]) -> Self {
        #[derive(Serialize)]
        struct Keyed<'a> {
            model_name: &'a str,
            temperature: f64,
            turns: &'a [ChatTurn],
        }
        let bytes = serde_json::to_vec(&Keyed {
            model_name,
            temperature,
            turns,
        })
        .expect("request serializes");
        Self(hex::encode(Sha256::digest(bytes)))
    }

    pub fn as_hex(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub model_name: String,
    pub timestamp: String,
    pub response_text: String,
}

/// One JSON file per key under a directory. Writes go through a temp file
/// and an atomic rename.
#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    io_failures: AtomicUsize,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            io_failures: AtomicUsize::new(0),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(format!("{}.json", key.as_hex()))
    }

    pub fn get(&self, key: &CacheKey) -> Option<CacheEntry> {
        let path = self.path(key);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return None,
            Err(e) => {
                self.note_failure(&path, &e.to_string());
                return None;
            }
        };
        match serde_json::from_slice::<CacheEntry>(&bytes) {
            Ok(entry) if entry.key == key.as_hex() => Some(entry),
            Ok(_) => None,
            Err(e) => {
                self.note_failure(&path, &e.to_string());
                None
            }
        }
    }

    pub fn put(&self, key: &CacheKey, model_name: &str, response_text: &str) {
        let entry = CacheEntry {
            key: key.as_hex().to_string(),
            model_name: model_name.to_string(),
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            response_text: response_text.to_string(),
        };
        let path = self.path(key);
        let result = (|| -> std::io::Result<()> {
            let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
            tmp.write_all(&serde_json::to_vec_pretty(&entry).expect("entry serializes"))?;
            tmp.as_file().sync_all()?;
            tmp.persist(&path).map_err(|e| e.error)?;
            Ok(())
        })();
        if let Err(e) = result {
            self.note_failure(&path, &e.to_string());
        }
    }

    /// Count of read/write failures that were degraded to cache misses.
    pub fn io_failures(&self) -> usize {
        self.io_failures.load(Ordering::Relaxed)
    }

    fn note_failure(&self, path: &Path, msg: &str) {
        self.io_failures.fetch_add(1, Ordering::Relaxed);
        log::warn!("response cache I/O failure at {}: {msg}", path.display());
    }
}

/// Wraps a backend with an optional response cache.
pub struct CachedBackend<B> {
    inner: B,
    cache: Option<ResponseCache>,
}

impl<B: ChatBackend> CachedBackend<B> {
    pub fn new(inner: B, cache: Option<ResponseCache>) -> Self {
        Self { inner, cache }
    }

    pub fn uncached(inner: B) -> Self {
        Self { inner, cache: None }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn cache(&self) -> Option<&ResponseCache> {
        self.cache.as_ref()
    }

    /// Returns the response text and whether it came from the cache.
    pub fn cached_complete(&self, turns: &[ChatTurn]) -> Result<(String, bool), BackendError> {
        let Some(cache) = &self.cache else {
            return self.inner.complete(turns).map(|t| (t, false));
        };
        let key = CacheKey::new(self.inner.model_name(), self.inner.temperature(), turns);
        if let Some(hit) = cache.get(&key) {
            return Ok((hit.response_text, true));
        }
        let text = self.inner.complete(turns)?;
        cache.put(&key, self.inner.model_name(), &text);
        Ok((text, false))
    }
}

impl<B: ChatBackend> ChatBackend for CachedBackend<B> {
    fn complete(&self, turns: &[ChatTurn]) -> Result<String, BackendError> {
        self.cached_complete(turns).map(|(t, _)| t)
    }

    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    fn temperature(&self) -> f64 {
        self.inner.temperature()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Route, ScriptedBackend};

    struct Temp(ScriptedBackend, f64);

    impl ChatBackend for Temp {
        fn complete(&self, turns: &[ChatTurn]) -> Result<String, BackendError> {
            self.0.complete(turns)
        }
        fn model_name(&self) -> &str {
            "m"
        }
        fn temperature(&self) -> f64 {
            self.1
        }
    }

    fn turns() -> Vec<ChatTurn> {
        vec![
            ChatTurn::system(Route::new("s1", "direct").header("sys")),
            ChatTurn::user("q", Some("img.jpg".into())),
        ]
    }

    fn script() -> ScriptedBackend {
        ScriptedBackend::from_entries([("s1", "direct", "fall")]).unwrap()
    }

    #[test]
    fn second_call_hits() {
        let dir = tempfile::tempdir().unwrap();
        let b = CachedBackend::new(script(), Some(ResponseCache::open(dir.path()).unwrap()));
        assert_eq!(b.cached_complete(&turns()).unwrap(), ("fall".into(), false));
        assert_eq!(b.cached_complete(&turns()).unwrap(), ("fall".into(), true));
        assert_eq!(b.inner().calls(), 1);
        let files: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(files.len(), 1);
    }

    #[test]
    fn temperature_is_part_of_the_key() {
        let t = turns();
        assert_ne!(CacheKey::new("m", 0.0, &t), CacheKey::new("m", 0.7, &t));
        assert_eq!(CacheKey::new("m", 0.0, &t), CacheKey::new("m", 0.0, &t));
        let mut other = t.clone();
        other[1].image_ref = Some("img2.jpg".into());
        assert_ne!(CacheKey::new("m", 0.0, &t), CacheKey::new("m", 0.0, &other));

        let dir = tempfile::tempdir().unwrap();
        let cold = CachedBackend::new(Temp(script(), 0.0), Some(ResponseCache::open(dir.path()).unwrap()));
        cold.cached_complete(&t).unwrap();
        let warm = CachedBackend::new(Temp(script(), 0.7), Some(ResponseCache::open(dir.path()).unwrap()));
        assert!(!warm.cached_complete(&t).unwrap().1);
    }

    #[test]
    fn disabled_cache_never_hits() {
        let b = CachedBackend::uncached(script());
        assert_eq!(b.cached_complete(&turns()).unwrap(), ("fall".into(), false));
        assert_eq!(b.cached_complete(&turns()).unwrap(), ("fall".into(), false));
    }

    #[test]
    fn corrupt_entry_degrades_to_miss() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let key = CacheKey::new("scripted", 0.0, &turns());
        fs::write(dir.path().join(format!("{}.json", key.as_hex())), b"{not json").unwrap();
        let b = CachedBackend::new(script(), Some(cache));
        assert_eq!(b.cached_complete(&turns()).unwrap(), ("fall".into(), false));
        assert_eq!(b.cache().unwrap().io_failures(), 1);
        assert_eq!(b.cached_complete(&turns()).unwrap(), ("fall".into(), true));
    }
}
