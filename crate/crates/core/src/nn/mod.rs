//! Minimal reverse-mode tensor layer: dense f64 tensors, a tape with the ops
//! the policy networks need, attention with key-padding masks, Adam, and a
//! finite-difference gradient checker.

pub mod adam;
pub mod check;
pub mod graph;
pub mod mha;
pub mod tensor;

pub use adam::{clip_scale, global_grad_norm, Adam};

/// Raise the allocator's mmap threshold once per process. Training allocates
/// and frees multi-megabyte activation buffers at a high rate; leaving them
/// on the heap free lists avoids per-tensor mmap and page-fault churn.
pub fn tune_allocator() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    });
}
pub use check::{finite_diff_check, rel_err, GradCheckReport};
pub use graph::{Graph, NnError, TensorId};
pub use mha::{mha_forward, MhaParams};
pub use tensor::Tensor;
