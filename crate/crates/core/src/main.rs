fn main() {
    std::process::exit(arf_core::cli::run_cli(std::env::args_os()));
}
