// SPDX-License-Identifier: MIT OR Apache-2.0

fn main() {
    std::process::exit(lookahead_lab_core::cli::run(std::env::args_os()));
}
