use std::process::ExitCode;

fn main() -> ExitCode {
    skelcompress::cli::run(std::env::args_os())
}
