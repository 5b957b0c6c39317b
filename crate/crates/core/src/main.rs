use std::process::ExitCode;

fn main() -> ExitCode {
    artifact_share::cli::main()
}
