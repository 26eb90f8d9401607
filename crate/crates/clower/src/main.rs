fn main() {
    std::process::exit(clower::cli::run(std::env::args_os()));
}
