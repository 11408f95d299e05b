fn main() {
    std::process::exit(clad::cli::run_cli(std::env::args_os()));
}
