fn main() {
    std::process::exit(graspforge::pipeline::cli::run_cli(std::env::args_os()));
}
