fn main() {
    std::process::exit(fbnet::cli::run(std::env::args_os()));
}
