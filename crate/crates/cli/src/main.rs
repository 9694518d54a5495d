fn main() {
    std::process::exit(dfrc_cli::run_cli(std::env::args_os()));
}
