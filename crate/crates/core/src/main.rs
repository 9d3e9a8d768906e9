use clap::Parser;

fn main() {
    let cli = gatefuse::cli::Cli::parse();
    if let Err(e) = gatefuse::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
