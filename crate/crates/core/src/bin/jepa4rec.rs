fn main() {
    std::process::exit(jepa4rec::cli::run(std::env::args_os()));
}
