use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(dbcl_cli::run(std::env::args_os()))
}
