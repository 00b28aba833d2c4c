//! Heap tuning for the training loop's allocation pattern: every step builds
//! and drops multi-megabyte tensors, which glibc would otherwise hand back to
//! the kernel and fault in again on the next step.

use std::sync::Once;

/// Keeps freed tensor buffers inside the process heap. A no-op off glibc.
pub fn retain_freed_memory() {
    static INIT: Once = Once::new();
    INIT.call_once(|| {
        #[cfg(all(target_os = "linux", target_env = "gnu"))]
        // SAFETY: mallopt only adjusts allocator thresholds and is called once.
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
            libc::mallopt(libc::M_TOP_PAD, 64 << 20);
        }
    });
}
