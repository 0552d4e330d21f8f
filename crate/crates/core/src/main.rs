fn main() {
    std::process::exit(tlqr::cli::run(std::env::args_os()));
}
