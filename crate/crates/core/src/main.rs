fn main() {
    std::process::exit(usnet::cli::run(std::env::args_os()));
}
