fn main() {
    std::process::exit(slp_core::analysis::cli::cli_main(std::env::args_os()));
}
