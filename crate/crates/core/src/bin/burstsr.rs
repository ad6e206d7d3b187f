use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(burstsr::cli::run(std::env::args_os()))
}
