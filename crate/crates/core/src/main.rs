fn main() {
    std::process::exit(hybridcox::cli::main_with_args(std::env::args_os()));
}
