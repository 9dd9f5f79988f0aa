//! Command-line front end for the `nce-core` estimators.
//!
//! Every command writes its outputs and a `manifest.json` into the `--out`
//! directory. CSV outputs start with a `# manifest: <hash>` line.

pub mod args;
pub mod commands;
pub mod manifest;
pub mod noise;

use nce_core::ErrorKind;

/// Process exit status for a failed run.
pub fn exit_code(kind: ErrorKind) -> i32 {
    match kind {
        ErrorKind::Validation | ErrorKind::Io => 2,
        ErrorKind::Numeric => 3,
        ErrorKind::Budget => 4,
    }
}

/// Caps rayon's global pool at `NCE_LAB_THREADS` when set.
pub fn configure_threads(value: Option<&str>) -> Result<(), String> {
    let Some(v) = value else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| format!("NCE_LAB_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}
