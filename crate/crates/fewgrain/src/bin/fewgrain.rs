fn main() {
    std::process::exit(fewgrain::cli::run(std::env::args().skip(1)));
}
