use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(rrqr_lora_cli::run(std::env::args_os()))
}
