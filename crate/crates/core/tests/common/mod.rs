//! Checks shared by the focused test files and the acceptance summary. Each
//! returns `Ok(detail)` or `Err(reason)` instead of panicking so a summary
//! can report all of them.
#![allow(dead_code)]

pub mod arithmetic;
pub mod baseline;
pub mod freeze;
pub mod grad;
pub mod metric;
pub mod pipeline;
pub mod probe;

pub type Outcome = Result<String, String>;

/// Turns a library error into a failure reason.
pub fn lib<T>(r: mmprobe::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

pub fn ensure(cond: bool, reason: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(reason())
    }
}
