use clap::Parser;

fn main() {
    let cli = rotorflow_cli::Cli::parse();
    if let Err(e) = rotorflow_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
