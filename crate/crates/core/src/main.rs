fn main() {
    std::process::exit(isaacslab::cli::run(std::env::args_os()));
}
