//! Concurrent sample loading through a bounded queue.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use crate::error::Result;
use crate::io::load_sample;
use crate::render::Sample;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoaderConfig {
    /// Queue capacity between workers and the consumer.
    pub prefetch: usize,
    pub workers: usize,
    /// Yield samples in token-list order instead of completion order.
    pub deterministic_order: bool,
}

impl Default for LoaderConfig {
    fn default() -> Self {
        Self {
            prefetch: 4,
            workers: 2,
            deterministic_order: true,
        }
    }
}

/// Iterator over `(index, sample)` for a token list.
pub struct Loader {
    rx: Receiver<(usize, Result<Sample>)>,
    pending: BTreeMap<usize, Result<Sample>>,
    next: usize,
    remaining: usize,
    deterministic: bool,
    workers: Vec<JoinHandle<()>>,
}

impl Loader {
    pub fn new(root: impl Into<PathBuf>, tokens: Vec<String>, cfg: &LoaderConfig) -> Self {
        let root = Arc::new(root.into());
        let tokens = Arc::new(tokens);
        let cursor = Arc::new(AtomicUsize::new(0));
        let (tx, rx) = sync_channel(cfg.prefetch.max(1));
        let workers = (0..cfg.workers.max(1))
            .map(|_| {
                let (root, tokens, cursor, tx) = (root.clone(), tokens.clone(), cursor.clone(), tx.clone());
                std::thread::spawn(move || loop {
                    let i = cursor.fetch_add(1, Ordering::SeqCst);
                    if i >= tokens.len() {
                        break;
                    }
                    if tx.send((i, load_sample(&root, &tokens[i]))).is_err() {
                        break;
                    }
                })
            })
            .collect();
        Self {
            rx,
            pending: BTreeMap::new(),
            next: 0,
            remaining: tokens.len(),
            deterministic: cfg.deterministic_order,
            workers,
        }
    }
}

impl Iterator for Loader {
    type Item = (usize, Result<Sample>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        if !self.deterministic {
            let item = self.rx.recv().ok()?;
            self.remaining -= 1;
            return Some(item);
        }
        loop {
            if let Some(s) = self.pending.remove(&self.next) {
                self.next += 1;
                self.remaining -= 1;
                return Some((self.next - 1, s));
            }
            let (i, s) = self.rx.recv().ok()?;
            self.pending.insert(i, s);
        }
    }
}

impl Drop for Loader {
    fn drop(&mut self) {
        // unblock workers waiting on a full queue
        while self.rx.try_recv().is_ok() {}
        let (_, dead) = sync_channel(0);
        let rx = std::mem::replace(&mut self.rx, dead);
        drop(rx);
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}
