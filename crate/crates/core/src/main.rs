fn main() {
    std::process::exit(protomoe::cli::main_with_args(std::env::args_os()));
}
