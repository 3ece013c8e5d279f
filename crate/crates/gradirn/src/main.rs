fn main() {
    std::process::exit(gradirn::cli::main_with_args(std::env::args_os()));
}
