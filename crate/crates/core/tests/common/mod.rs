#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use m2m_core::config::PipelineConfig;
use m2m_core::orchestrator::{ingest, Backends};

pub const BOOK_ID: &str = "harbor_days";

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

/// Ingest the fixture book into `dir/library` and return the library path.
pub fn library(dir: &Path) -> PathBuf {
    let lib = dir.join("library");
    ingest(&fixtures().join("books"), BOOK_ID, &lib).expect("fixture book ingests");
    lib
}

/// Mock configuration with short pages so tests stay fast.
pub fn quick_config() -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.music.page_duration_s = 4.0;
    c.music.overlap_s = 1.0;
    c.baselines.pool_size = 4;
    c
}

pub fn mock_backends(config: &PipelineConfig) -> Backends {
    Backends::from_config(config).expect("mock backends")
}

/// Every file under `root`, keyed by relative path.
pub fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}
