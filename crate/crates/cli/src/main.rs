use clap::Parser;

fn main() {
    let cli = sqrtlab_cli::Cli::parse();
    std::process::exit(sqrtlab_cli::dispatch(&cli));
}
