fn main() {
    std::process::exit(landslide_cli::run(std::env::args_os()));
}
