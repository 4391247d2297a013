//! Domain model and pure decision logic for a staged peer-testing platform.
//!
//! A coursework moves forward through four stages (setup, self-testing,
//! peer-testing, teacher feedback). Each stage opens and closes a fixed set of
//! student capabilities, which [`permissions`] decides. Everything in this
//! crate is free of I/O so it can be shared by the service, the execution
//! harness and the admin tooling.

pub mod error;
pub mod feedback;
pub mod grouping;
pub mod lifecycle;
pub mod model;
pub mod monitoring;
pub mod permissions;
pub mod pseudonym;

pub use error::{CoreError, Result};
pub use model::*;
