fn main() {
    std::process::exit(dvpp_core::cli::main_with_args(std::env::args_os()));
}
