fn main() {
    std::process::exit(embedkit::cli::run(std::env::args_os()));
}
