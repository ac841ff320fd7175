//! Bounded producer/consumer pipeline: a worker thread runs ahead of the consumer by at most
//! `capacity` finished items.

use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::JoinHandle;

pub struct Prefetch<T> {
    rx: Option<Receiver<T>>,
    worker: Option<JoinHandle<()>>,
}

impl<T: Send + 'static> Prefetch<T> {
    /// Maps `items` through `f` on a worker thread, yielding results in input order.
    pub fn spawn<I, F>(items: I, capacity: usize, mut f: F) -> Self
    where
        I: IntoIterator + Send + 'static,
        I::IntoIter: Send,
        F: FnMut(I::Item) -> T + Send + 'static,
    {
        let (tx, rx) = sync_channel(capacity.max(1));
        let worker = std::thread::spawn(move || {
            for item in items {
                // the consumer hung up; stop producing
                if tx.send(f(item)).is_err() {
                    break;
                }
            }
        });
        Self { rx: Some(rx), worker: Some(worker) }
    }
}

impl<T> Iterator for Prefetch<T> {
    type Item = T;

    fn next(&mut self) -> Option<T> {
        let item = self.rx.as_ref()?.recv().ok();
        if item.is_none() {
            self.finish();
        }
        item
    }
}

impl<T> Prefetch<T> {
    fn finish(&mut self) {
        self.rx = None;
        if let Some(w) = self.worker.take() {
            if let Err(panic) = w.join() {
                std::panic::resume_unwind(panic);
            }
        }
    }
}

impl<T> Drop for Prefetch<T> {
    fn drop(&mut self) {
        self.rx = None;
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;
    use std::time::Duration;

    #[test]
    fn preserves_order() {
        let out: Vec<u64> = Prefetch::spawn(0..100u64, 3, |i| i * i).collect();
        assert_eq!(out, (0..100u64).map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn producer_stays_within_the_bound() {
        let made = Arc::new(AtomicUsize::new(0));
        let counter = made.clone();
        let mut p = Prefetch::spawn(0..50, 2, move |i| {
            counter.fetch_add(1, Ordering::SeqCst);
            i
        });
        std::thread::sleep(Duration::from_millis(100));
        // two queued plus one blocked in send
        assert!(made.load(Ordering::SeqCst) <= 3);
        assert_eq!(p.next(), Some(0));
        drop(p);
        assert!(made.load(Ordering::SeqCst) < 50);
    }
}
