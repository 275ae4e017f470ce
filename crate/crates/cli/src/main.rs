use std::process::ExitCode;

fn main() -> ExitCode {
    let mut stdout = std::io::stdout().lock();
    ExitCode::from(ar1vae::run_from_args(std::env::args_os(), &mut stdout))
}
