//! Backend implementations behind the captioner, detector, embedder and LLM
//! interfaces: deterministic mocks, out-of-process adapters speaking
//! newline-delimited JSON over stdio, and an HTTP chat-completions client.

pub mod mock;
pub mod openai;
pub mod stdio;

use std::sync::{Arc, Condvar, Mutex};

use crate::error::Result;

/// Text completion: one system message, one user prompt, one reply.
pub trait LlmBackend: Send + Sync {
    fn id(&self) -> &str;

    fn max_concurrency(&self) -> usize {
        1
    }

    fn complete(&self, system: &str, prompt: &str) -> Result<String>;
}

/// Counting semaphore shared by every caller of one backend.
#[derive(Debug)]
pub struct Semaphore {
    available: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Semaphore {
            available: Mutex::new(permits.max(1)),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut available = self.available.lock().expect("semaphore poisoned");
        while *available == 0 {
            available = self.freed.wait(available).expect("semaphore poisoned");
        }
        *available -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().expect("semaphore poisoned") += 1;
        self.0.freed.notify_one();
    }
}

/// A backend plus the gate that caps concurrent calls into it.
pub struct Gated<T: ?Sized> {
    inner: Arc<T>,
    gate: Semaphore,
}

impl<T: ?Sized> Gated<T> {
    pub fn new(inner: Arc<T>, max_concurrency: usize) -> Self {
        Gated {
            inner,
            gate: Semaphore::new(max_concurrency),
        }
    }

    pub fn run<R>(&self, f: impl FnOnce(&T) -> R) -> R {
        let _permit = self.gate.acquire();
        f(&self.inner)
    }

    pub fn inner(&self) -> &T {
        &self.inner
    }
}
