fn main() {
    std::process::exit(cfmlab_cli::run_cli(std::env::args_os()));
}
