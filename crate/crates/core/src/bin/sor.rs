use clap::Parser;

fn main() {
    let cli = sor::cli::Cli::parse();
    std::process::exit(sor::cli::run(cli));
}
