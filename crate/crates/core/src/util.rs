//! Small shared helpers: seeded RNG construction and worker-thread caps.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Environment variable capping worker parallelism for batch-parallel stages.
pub const THREADS_ENV: &str = "DUOCLIP_THREADS";

/// Deterministic RNG from a u64 seed. All randomness in the crate flows
/// through this so runs are reproducible from a single seed.
pub fn seeded_rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Derive an independent stream from a base seed and a stream index.
/// Used where sub-tasks (per class, per probe cell) need their own RNG.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Worker threads allowed for parallel batch stages; `DUOCLIP_THREADS`
/// caps it, default 1 (fully sequential).
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Run `f(i)` for every index in `0..n`, in parallel when the thread cap
/// allows, collecting results in index order so output is independent of
/// scheduling.
pub fn indexed_map<T, Fn_>(n: usize, f: Fn_) -> Vec<T>
where
    T: Send,
    Fn_: Fn(usize) -> T + Send + Sync,
{
    let threads = worker_threads().min(n.max(1));
    if threads <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool construction");
    pool.install(|| {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    })
}
