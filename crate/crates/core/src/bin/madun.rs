fn main() {
    std::process::exit(madun_core::cli::run(std::env::args()));
}
