fn main() {
    std::process::exit(oscifit_cli::run(std::env::args_os()));
}
