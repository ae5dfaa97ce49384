use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(hotfix_cli::app::run_from(std::env::args_os()) as u8)
}
