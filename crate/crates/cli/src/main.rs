fn main() {
    if let Err(e) = safediff_cli::run(std::env::args_os()) {
        eprintln!("safediff: {e}");
        std::process::exit(e.exit_code());
    }
}
