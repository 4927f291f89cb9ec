use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(super_cli::run(std::env::args_os()))
}
