use std::process::ExitCode;

fn main() -> ExitCode {
    let cli = match clbp::cli::parse(std::env::args().collect()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match clbp::cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
