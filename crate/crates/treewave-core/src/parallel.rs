//! Deterministic fork-join helper. Work items are mapped by index and the
//! results merged in input order, so the output is identical whatever the
//! thread count. `TREEWAVE_THREADS` caps concurrency (0 means serial).

pub const THREADS_ENV: &str = "TREEWAVE_THREADS";

/// Resolve a thread count: an explicit request wins, otherwise the
/// environment variable, otherwise the machine's parallelism.
pub fn resolve_threads(requested: Option<usize>) -> usize {
    let raw = requested.or_else(|| {
        std::env::var(THREADS_ENV).ok().and_then(|s| s.trim().parse::<usize>().ok())
    });
    match raw {
        Some(0) | Some(1) => 1,
        Some(n) => n,
        None => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    }
}

/// Map `f` over `items`, running up to `threads` workers. Results come back
/// in input order regardless of scheduling.
pub fn map_indexed<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let n = items.len();
    if n == 0 {
        return Vec::new();
    }
    let workers = threads.clamp(1, n);
    if workers == 1 {
        return items.iter().enumerate().map(|(i, item)| f(i, item)).collect();
    }

    let mut slots: Vec<Option<R>> = (0..n).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slot_ptr = SendPtr(slots.as_mut_ptr());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let next = &next;
            let f = &f;
            let slot_ptr = &slot_ptr;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(i, &items[i]);
                // Each index is claimed by exactly one worker.
                unsafe { *slot_ptr.0.add(i) = Some(r) };
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

struct SendPtr<R>(*mut Option<R>);
unsafe impl<R: Send> Sync for SendPtr<R> {}
unsafe impl<R: Send> Send for SendPtr<R> {}
