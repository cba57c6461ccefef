fn main() {
    std::process::exit(diffedit::cli::run(std::env::args_os()));
}
