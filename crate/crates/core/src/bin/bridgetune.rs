fn main() {
    std::process::exit(bridgetune::cli::main_with_args(std::env::args_os()));
}
