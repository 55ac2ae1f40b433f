//! Dense tensors, transforms, differentiable primitives and optimization.

mod adam;
pub mod checkpoint;
mod conv;
mod correlate;
mod fft;
pub mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use correlate::freq_cross_correlate;
pub use fft::{circular_convolve, circular_correlate, fft, fft_complex, ifft, ComplexBuffer};
pub use graph::{sigmoid, CustomOp, Gradients, Graph, Var};
pub use params::{ParamEntry, ParamId, ParamStore};
pub use tensor::{matmul, Tensor};
pub(crate) use tensor::gemm;

/// Deterministic RNG used throughout.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
