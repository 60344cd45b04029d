use std::process::ExitCode;

fn main() -> ExitCode {
    semseg_cli::tune_allocator();
    semseg_cli::init_logging();
    semseg_cli::main_with_args(std::env::args_os())
}
