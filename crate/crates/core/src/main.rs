fn main() {
    std::process::exit(advdiff::cli::main_with_args(std::env::args_os()));
}
