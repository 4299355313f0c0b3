fn main() {
    std::process::exit(mmfuse_cli::run(std::env::args_os()));
}
