use clap::Parser;

fn main() {
    let cli = clipper::cli::Cli::parse();
    std::process::exit(clipper::cli::execute(cli));
}
