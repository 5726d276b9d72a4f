use clap::Parser;

fn main() {
    let cli = hamflow::cli::Cli::parse();
    match hamflow::cli::run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
