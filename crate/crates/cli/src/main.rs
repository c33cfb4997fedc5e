fn main() {
    std::process::exit(nsum_cli::main_with_args(std::env::args_os()));
}
