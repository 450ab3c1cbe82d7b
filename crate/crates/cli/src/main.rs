fn main() {
    std::process::exit(dlsp_cli::run_cli(std::env::args_os()));
}
