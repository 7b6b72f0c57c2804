use std::io;

fn main() {
    let argv: Vec<String> = std::env::args().collect();
    let code = remreg_core::cli::run_command(&argv, &mut io::stdout(), &mut io::stderr());
    std::process::exit(code);
}
