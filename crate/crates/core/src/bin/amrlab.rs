fn main() {
    std::process::exit(amrlab::cli::main_with_args(std::env::args_os()));
}
