fn main() {
    std::process::exit(discover::cli::main());
}
