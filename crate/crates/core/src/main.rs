fn main() {
    std::process::exit(advlab::cli::run(std::env::args_os()));
}
