fn main() {
    std::process::exit(gsi_core::cli_io::run_cli(std::env::args_os()));
}
