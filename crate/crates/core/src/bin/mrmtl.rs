fn main() {
    std::process::exit(mrmtl::cli::main_with_args(std::env::args_os()));
}
