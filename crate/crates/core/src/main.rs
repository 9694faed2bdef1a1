fn main() {
    std::process::exit(shadow_forge::cli::main_with_args(std::env::args_os()));
}
