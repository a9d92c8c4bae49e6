use clap::Parser;

fn main() {
    let code = syncgrid::cli::execute(syncgrid::cli::Cli::parse());
    std::process::exit(code);
}
