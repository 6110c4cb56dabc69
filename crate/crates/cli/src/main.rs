use clap::Parser;
use coevo_cli::{run, Cli, Outcome};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(&cli) {
        Ok((outcome, files)) => {
            for f in &files {
                println!("{}", f.display());
            }
            if let Outcome::Violation(msg) = outcome {
                eprintln!("violation: {msg}");
                std::process::exit(2);
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
