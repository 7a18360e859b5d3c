fn main() {
    std::process::exit(rvb::cli::main_from_args(std::env::args_os()));
}
