fn main() {
    std::process::exit(adapref_cli::run(std::env::args_os()));
}
