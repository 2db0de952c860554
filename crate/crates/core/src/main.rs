use std::process::ExitCode;

fn main() -> ExitCode {
    fabnet::cli::run(std::env::args_os())
}
