use clap::Parser;

fn main() {
    let cli = rlvla_cli::Cli::parse();
    if let Err(e) = rlvla_cli::run(cli) {
        eprintln!("rlvla: {e}");
        std::process::exit(e.exit_code());
    }
}
