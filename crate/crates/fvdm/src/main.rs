use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(fvdm::cli::run(std::env::args_os()))
}
