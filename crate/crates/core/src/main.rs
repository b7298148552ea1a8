fn main() {
    std::process::exit(cstvae::cli::main_with_args(std::env::args_os()));
}
