//! Scoped worker-pool helper for tensor kernels.
//!
//! Kernels split their output range into disjoint chunks, one per worker, so
//! every output element is written by exactly one thread with a fixed
//! accumulation order. Results are therefore bit-identical regardless of the
//! thread count. `VHEGAN_THREADS` caps the pool; 1 disables threading.

use std::sync::OnceLock;

static THREADS: OnceLock<usize> = OnceLock::new();

/// Worker count: `VHEGAN_THREADS` if set, else min(available cores, 4).
pub fn worker_count() -> usize {
    *THREADS.get_or_init(|| {
        if let Ok(v) = std::env::var("VHEGAN_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                return n.max(1);
            }
        }
        std::thread::available_parallelism()
            .map(|n| n.get().min(4))
            .unwrap_or(1)
    })
}

/// Run `body(chunk_start, chunk_end)` over `0..n` split across workers.
/// `body` must only touch state it owns for its chunk.
pub fn for_chunks<F>(n: usize, body: F)
where
    F: Fn(usize, usize) + Sync,
{
    let workers = worker_count().min(n.max(1));
    if workers <= 1 || n < 2 {
        body(0, n);
        return;
    }
    let per = n.div_ceil(workers);
    std::thread::scope(|s| {
        for w in 0..workers {
            let lo = w * per;
            let hi = ((w + 1) * per).min(n);
            if lo >= hi {
                break;
            }
            let body = &body;
            s.spawn(move || body(lo, hi));
        }
    });
}

/// Split a mutable slice into per-chunk pieces of `chunk_len` and process
/// them in parallel with the chunk index. Used for batch-parallel kernels
/// where each batch element owns a contiguous output block.
pub fn for_blocks_mut<T: Send, F>(data: &mut [T], chunk_len: usize, body: F)
where
    F: Fn(usize, &mut [T]) + Sync,
{
    assert!(chunk_len > 0 && data.len() % chunk_len == 0);
    let n = data.len() / chunk_len;
    let workers = worker_count().min(n.max(1));
    // Thread spawn costs more than the work itself on small outputs.
    if workers <= 1 || n < 2 || data.len() < 16_384 {
        for (i, block) in data.chunks_mut(chunk_len).enumerate() {
            body(i, block);
        }
        return;
    }
    std::thread::scope(|s| {
        let mut rest = data;
        let per = n.div_ceil(workers);
        let mut start = 0usize;
        while !rest.is_empty() {
            let take = (per * chunk_len).min(rest.len());
            let (head, tail) = rest.split_at_mut(take);
            let body = &body;
            let first = start;
            s.spawn(move || {
                for (j, block) in head.chunks_mut(chunk_len).enumerate() {
                    body(first + j, block);
                }
            });
            start += take / chunk_len;
            rest = tail;
        }
    });
}
