fn main() {
    std::process::exit(medinject_cli::main_with(std::env::args()));
}
