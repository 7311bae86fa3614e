use std::process::ExitCode;

fn main() -> ExitCode {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    ExitCode::from(mckv_cli::execute(std::env::args_os(), &mut out))
}
