fn main() {
    std::process::exit(cbdr::cli::run(std::env::args_os()));
}
