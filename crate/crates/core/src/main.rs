fn main() {
    std::process::exit(fstoch::cli::run(std::env::args_os()));
}
