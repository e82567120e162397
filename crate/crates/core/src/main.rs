fn main() {
    std::process::exit(imputer::cli::run(std::env::args_os()));
}
