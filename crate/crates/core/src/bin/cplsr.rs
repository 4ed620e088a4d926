fn main() {
    std::process::exit(cplsr_core::cli::main_with_args(std::env::args_os()));
}
