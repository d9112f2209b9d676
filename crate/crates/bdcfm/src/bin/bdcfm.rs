//! Command-line entry point; all behavior lives in [`bdcfm::cli`].

use std::process::ExitCode;

fn main() -> ExitCode {
    bdcfm::cli::main()
}
