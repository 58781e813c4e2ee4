use clap::Parser;

fn main() {
    let cli = alsim::cli::Cli::parse();
    if let Err(e) = alsim::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
