fn main() {
    std::process::exit(sfxgan::cli::main_with_args(std::env::args_os()));
}
