//! Benchmark orchestration: manifests, parallel scoring, synthetic suites and reports.

pub mod bench;
pub mod config;
pub mod domain;
pub mod report;
pub mod synth;

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use thiserror::Error;

use crate::attention::AttentionError;
use crate::store::StoreError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("no records for the {0} layout")]
    EmptyInput(String),
    #[error("every pair failed in condition block {model_id}/{dataset}/{condition}")]
    EmptyConditionBlock { model_id: String, dataset: String, condition: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("internal error: {0}")]
    Internal(String),
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// Process exit code: 1 for bad or missing input, 3 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 1,
            Self::Io { .. } | Self::Internal(_) => 3,
            _ => 1,
        }
    }
}

/// Maps `f` over `items` on up to `workers` threads; output order matches input order.
pub fn run_parallel<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let done = Mutex::new(Vec::with_capacity(items.len()));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let r = f(item);
                done.lock().unwrap_or_else(|e| e.into_inner()).push((i, r));
            });
        }
    });
    let mut done = done.into_inner().unwrap_or_else(|e| e.into_inner());
    done.sort_unstable_by_key(|(i, _)| *i);
    done.into_iter().map(|(_, r)| r).collect()
}
