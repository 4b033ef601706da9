fn main() {
    std::process::exit(sdserve::cli::run(std::env::args_os()));
}
