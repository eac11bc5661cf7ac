use std::process::exit;

fn main() {
    exit(revoice::cli::run(std::env::args_os()));
}
