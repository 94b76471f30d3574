fn main() {
    std::process::exit(ensemble_control::cli::run_command(std::env::args_os()));
}
