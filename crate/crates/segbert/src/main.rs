fn main() {
    std::process::exit(segbert::cli::run(std::env::args()));
}
