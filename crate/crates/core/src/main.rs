fn main() {
    std::process::exit(matseg_core::cli::run(std::env::args_os()));
}
