fn main() {
    std::process::exit(permsplit_cli::main_with_args(std::env::args_os()));
}
