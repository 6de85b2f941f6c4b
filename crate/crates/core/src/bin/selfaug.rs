use clap::error::ErrorKind;
use clap::Parser;
use selfaugment::cli::{execute, exit_code, Cli};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            std::process::exit(code);
        }
    };
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: cannot start {n} workers: {e}");
            std::process::exit(2);
        }
    }
    let result = execute(&cli);
    match &result {
        Ok(dir) => println!("{}", dir.display()),
        Err(e) => eprintln!("error: {e}"),
    }
    std::process::exit(exit_code(&result));
}
