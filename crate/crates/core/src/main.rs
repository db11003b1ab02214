// SPDX-License-Identifier: MIT OR Apache-2.0

fn main() {
    std::process::exit(attn_relevance::cli::main_with_args(std::env::args_os()));
}
