fn main() {
    std::process::exit(pmp_core::cli::run(std::env::args_os()));
}
