use clap::Parser;
use diffcd_cli::commands::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli, &mut |line| println!("{line}")) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
