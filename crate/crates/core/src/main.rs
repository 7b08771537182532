fn main() {
    std::process::exit(midqr::cli::main_with_args(std::env::args_os()));
}
