//! Dense layers, ReLU, LSTM/BLSTM cells, softmax cross-entropy, SGD and a
//! finite-difference gradient checker. Everything is f64.

pub mod gradcheck;
pub mod linalg;
pub mod loss;
pub mod lstm;
pub mod params;

pub use gradcheck::{gradient_check, GradCheckReport};
pub use linalg::{dense_forward, relu, Matrix};
pub use loss::{softmax, softmax_cross_entropy};
pub use lstm::{blstm_forward, lstm_step, Blstm, BlstmLayer, BlstmOutput, Gate, LstmParams};
pub use params::{clip_global_norm, global_norm, sgd_step, GradientSet, Parameters};
