use clap::Parser;

fn main() -> std::process::ExitCode {
    let cli = tad::cli::Cli::parse();
    let stdout = std::io::stdout();
    match tad::cli::run(cli, &mut stdout.lock()) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}
