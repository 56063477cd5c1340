use std::process::ExitCode;

fn main() -> ExitCode {
    nightseg::cli::run()
}
