fn main() {
    std::process::exit(htnet::cli::run(std::env::args_os()));
}
