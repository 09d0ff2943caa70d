//! Dense tensors, reverse-mode gradients, layers, FFT and optimizers.

pub mod fft;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use fft::{dft, fft_magnitude_slow_time, naive_dft};
pub use gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport};
pub use graph::{Activation, BackwardFault, Gradients, Graph, Var};
pub use layers::{conv2d_forward, dense_forward, lstm_forward, softmax, Conv2d, Dense, Lstm};
pub use optim::{sgd_step, AdamState};
pub use params::{Param, ParamId, ParamStore, Partition};
pub use tensor::{matmul, Scalar, Tensor};
