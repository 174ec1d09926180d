fn main() {
    std::process::exit(wildcode::cli::run());
}
