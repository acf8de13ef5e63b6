#![allow(dead_code)]

use std::path::PathBuf;
use std::time::Duration;

use nonn::core::engine::TensorProgram;
use nonn::core::trace::FcHead;
use nonn::formats::{load_head, load_images, load_program, ImageSet};
use nonn::runtime::{spawn_worker, WorkerConfig, WorkerHandle};
use serde_json::Value;

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn goldens() -> Value {
    serde_json::from_slice(&std::fs::read(fixtures().join("goldens.json")).unwrap()).unwrap()
}

pub fn images() -> ImageSet {
    load_images(&fixtures().join("test_images.nnim")).unwrap()
}

pub fn teacher() -> TensorProgram {
    load_program(&fixtures().join("teacher")).unwrap()
}

/// Student programs and head of `nonn_2s` or `nonn_8s`.
pub fn nonn(name: &str) -> (Vec<TensorProgram>, FcHead) {
    let dir = fixtures().join(name);
    let mut programs = Vec::new();
    while dir.join(format!("student{}", programs.len())).is_dir() {
        programs.push(load_program(&dir.join(format!("student{}", programs.len()))).unwrap());
    }
    (programs, load_head(&dir.join("fc.nnfc")).unwrap())
}

pub fn worker(program: Option<TensorProgram>, delay_ms: u64) -> WorkerHandle {
    spawn_worker(
        "127.0.0.1:0",
        WorkerConfig { program: program.map(std::sync::Arc::new), delay: Duration::from_millis(delay_ms) },
    )
    .unwrap()
}

pub fn addrs(workers: &[WorkerHandle]) -> Vec<String> {
    workers.iter().map(|w| w.addr().to_string()).collect()
}

pub fn as_usizes(v: &Value) -> Vec<usize> {
    v.as_array().unwrap().iter().map(|x| x.as_u64().unwrap() as usize).collect()
}
