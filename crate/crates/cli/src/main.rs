fn main() {
    std::process::exit(srtune_cli::run_cli(std::env::args_os()));
}
