fn main() {
    std::process::exit(dpdfd_core::cli::run_cli(std::env::args_os()));
}
