fn main() {
    std::process::exit(powshift::cli::main_with_args(std::env::args_os()));
}
