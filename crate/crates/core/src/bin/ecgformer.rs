use clap::Parser;

fn main() -> std::process::ExitCode {
    let cli = ecgformer_core::cli::Cli::parse();
    std::process::ExitCode::from(ecgformer_core::cli::run(cli))
}
