fn main() {
    std::process::exit(dst::cli::run(std::env::args().skip(1)));
}
