fn main() {
    std::process::exit(tinydet::cli::run(std::env::args_os()));
}
