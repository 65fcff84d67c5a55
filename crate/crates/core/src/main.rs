fn main() {
    std::process::exit(rocl::cli::run(std::env::args_os()));
}
