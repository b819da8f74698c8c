fn main() {
    std::process::exit(painlarks::cli::run(std::env::args_os()));
}
