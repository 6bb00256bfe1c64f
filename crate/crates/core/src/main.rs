fn main() {
    std::process::exit(bdr::harness::cli::run(std::env::args_os()));
}
