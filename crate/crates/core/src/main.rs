fn main() {
    std::process::exit(nslame::cli::run(std::env::args_os()));
}
