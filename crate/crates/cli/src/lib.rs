//! Dataset synthesis, training, sampling, cost tables and weight inspection
//! for the UL-MLP backbone.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod image;
pub mod optim;
pub mod train;

use lmlp_core::Error;

pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Bad input (arguments, config, captions) exits 2; everything else exits 1.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Usage(_) | Error::Config(_) => EXIT_USAGE,
        _ => EXIT_DOMAIN,
    }
}

/// Checks `LMLP_DETERMINISTIC`. Execution is always single-threaded and
/// seeded, so the only effect is rejecting malformed values.
pub fn check_deterministic_env() -> Result<bool, Error> {
    match std::env::var("LMLP_DETERMINISTIC") {
        Err(_) => Ok(false),
        Ok(v) if v == "1" => Ok(true),
        Ok(v) if v == "0" || v.is_empty() => Ok(false),
        Ok(v) => Err(Error::Usage(format!("LMLP_DETERMINISTIC must be 0 or 1, got `{v}`"))),
    }
}
