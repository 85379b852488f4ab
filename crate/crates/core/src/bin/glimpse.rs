fn main() {
    std::process::exit(glimpse::cli::run(std::env::args_os()));
}
