use clap::Parser;

fn main() {
    let cli = sve_cli::Cli::parse();
    std::process::exit(sve_cli::execute(&cli));
}
