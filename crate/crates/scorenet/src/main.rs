fn main() {
    std::process::exit(scorenet::cli::run(std::env::args_os()));
}
