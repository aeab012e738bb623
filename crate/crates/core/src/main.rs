fn main() {
    std::process::exit(molf::cli::main_with_args(std::env::args_os()));
}
