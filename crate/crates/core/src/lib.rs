//! Federated LoRA fine-tuning with heterogeneous client ranks.
//!
//! Clients share a frozen base derived from a thin QR of the pre-trained
//! weight and train low-rank factors seeded from its leading slices. The
//! server concatenates client factors, re-factors the exact weighted update
//! with a thin QR and hands every client back nested slices of one
//! orthonormal basis. A control-variate AdamW variant corrects for client
//! drift under non-IID data.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod linalg;
pub mod lora;
pub mod model;
pub mod optim;
pub mod verify;

pub use error::{Error, Result};
pub use linalg::Matrix;
