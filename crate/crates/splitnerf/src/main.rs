use clap::Parser;

fn main() {
    let cli = splitnerf::cli::Cli::parse();
    splitnerf::cli::init_threads(cli.threads);
    if let Err(err) = splitnerf::cli::run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
