fn main() {
    std::process::exit(optport::cli::main_with_args(std::env::args_os()));
}
