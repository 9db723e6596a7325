fn main() {
    std::process::exit(cfair::cli::run(std::env::args_os()));
}
