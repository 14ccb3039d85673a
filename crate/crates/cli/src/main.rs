use std::process::ExitCode;

fn main() -> ExitCode {
    let mut stdout = std::io::stdout();
    ExitCode::from(graspldp_cli::run_with(std::env::args_os(), &mut stdout))
}
