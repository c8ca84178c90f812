use clap::Parser;

fn main() {
    let cli = smpq::cli::Cli::parse();
    std::process::exit(smpq::cli::run(&cli));
}
