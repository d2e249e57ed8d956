fn main() {
    std::process::exit(bayesdiff::cli::run(std::env::args_os()));
}
