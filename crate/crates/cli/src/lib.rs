//! Library side of the command-line harness.

#![forbid(unsafe_code)]
