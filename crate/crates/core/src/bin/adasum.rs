fn main() {
    std::process::exit(adasum::cli::run(std::env::args()));
}
