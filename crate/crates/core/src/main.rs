use clap::Parser;

fn main() {
    let cli = mftr::cli::Cli::parse();
    if let Err(err) = mftr::cli::run(cli) {
        eprintln!("error: {err}");
        std::process::exit(mftr::cli::exit_code(&err));
    }
}
