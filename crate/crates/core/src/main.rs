fn main() {
    std::process::exit(panocc::cli::main_with_args(std::env::args_os()));
}
