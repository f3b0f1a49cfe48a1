use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(netcoop::cli::main_with_args(std::env::args_os()))
}
