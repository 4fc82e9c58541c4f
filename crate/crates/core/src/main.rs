fn main() {
    std::process::exit(klflow::cli::run_from_args(std::env::args_os()));
}
