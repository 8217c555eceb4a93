fn main() {
    std::process::exit(ism_cli::main_with_args(std::env::args_os()));
}
