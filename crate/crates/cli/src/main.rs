fn main() {
    std::process::exit(mcn_cli::run(std::env::args_os()));
}
