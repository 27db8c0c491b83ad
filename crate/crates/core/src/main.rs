fn main() {
    std::process::exit(stalekv::cli::cli_main(std::env::args_os()));
}
