fn main() {
    std::process::exit(kano::cli::run(std::env::args_os()));
}
