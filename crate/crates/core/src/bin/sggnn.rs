use std::process::ExitCode;

fn main() -> ExitCode {
    sggnn::cli::run()
}
