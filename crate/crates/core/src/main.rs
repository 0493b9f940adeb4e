fn main() {
    std::process::exit(dlmwpo::cli::run(std::env::args_os()));
}
