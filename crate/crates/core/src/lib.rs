//! Regularized attentive capsule network for multi-label relation
//! extraction under distant supervision.
//!
//! The pipeline for one sentence is
//! [`features::embed`] → [`encoder::blstm`] → [`attention::relation_query`]
//! → [`attention::multi_head`] → [`capsule::form_low_capsules`] →
//! [`capsule::dynamic_routing`], trained with [`loss::margin_loss`] plus the
//! disagreement terms of [`regularize`]. Everything runs on the small
//! reverse-mode tape in [`tensor`].

pub mod attention;
pub mod capsule;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod features;
pub mod gradcheck;
pub mod harness;
pub mod loss;
pub mod regularize;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
