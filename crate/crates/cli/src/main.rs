use std::process::ExitCode;

fn main() -> ExitCode {
    illdeath_cli::main_entry()
}
