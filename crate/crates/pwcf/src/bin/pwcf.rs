use clap::Parser;

fn main() {
    let cli = match pwcf::cli::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                eprint!("pwcf: error: {e}");
                std::process::exit(2);
            }
            // --help / --version render on stdout with exit code 0
            print!("{e}");
            std::process::exit(0);
        }
    };
    if let Err(e) = pwcf::cli::run(cli) {
        eprintln!("pwcf: error: {e}");
        std::process::exit(1);
    }
}
