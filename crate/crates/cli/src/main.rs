fn main() {
    std::process::exit(ace_cli::run(std::env::args_os()));
}
