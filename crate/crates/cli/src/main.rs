fn main() {
    std::process::exit(dctev_cli::run(std::env::args_os()));
}
