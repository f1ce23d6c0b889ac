fn main() {
    std::process::exit(dcran::cli::main_with_args(std::env::args_os()));
}
