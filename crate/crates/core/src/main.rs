use std::process::ExitCode;

fn main() -> ExitCode {
    roadcast::cli::main_entry(std::env::args_os())
}
