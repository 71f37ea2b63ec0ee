fn main() {
    std::process::exit(clamseg::cli::run(std::env::args_os()));
}
