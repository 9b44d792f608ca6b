fn main() {
    std::process::exit(sketchlm::cli::run(std::env::args()));
}
