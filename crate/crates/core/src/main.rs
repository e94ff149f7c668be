fn main() {
    std::process::exit(kexp::cli::run_cli(std::env::args_os()));
}
