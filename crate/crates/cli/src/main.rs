fn main() {
    std::process::exit(tunembed_cli::run(std::env::args_os()));
}
