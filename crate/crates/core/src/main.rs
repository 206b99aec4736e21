fn main() {
    std::process::exit(kvshrink::cli::run(std::env::args_os()));
}
