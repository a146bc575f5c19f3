fn main() {
    gadan::cli::init_logging();
    std::process::exit(gadan::cli::run_cli(std::env::args_os()));
}
