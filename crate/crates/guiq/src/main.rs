use std::process::ExitCode;

fn main() -> ExitCode {
    guiq::cli::main()
}
