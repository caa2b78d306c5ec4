// Copyright 2026 The vlgrape Authors
// SPDX-License-Identifier: Apache-2.0

pub mod cli;
pub mod densemath;
pub mod error;
pub mod model;
pub mod noise_analysis;
pub mod objective;
pub mod optimizer;
pub mod oracle;
pub mod propagation;
pub mod systems;

pub use error::{Error, Result};
