fn main() {
    std::process::exit(hydrocascade::cli::run(std::env::args_os()));
}
