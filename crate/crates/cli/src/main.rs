use clap::Parser;

fn main() {
    let cli = gidle_cli::Cli::parse();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    if let Err(e) = gidle_cli::run(cli, &mut out) {
        eprintln!("error: {e}");
        std::process::exit(e.code);
    }
}
