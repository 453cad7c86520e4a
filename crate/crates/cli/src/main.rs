fn main() {
    std::process::exit(glmc_cli::run_command(std::env::args_os()));
}
