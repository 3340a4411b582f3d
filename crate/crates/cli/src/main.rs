fn main() {
    std::process::exit(perfsim_cli::run(std::env::args_os()));
}
