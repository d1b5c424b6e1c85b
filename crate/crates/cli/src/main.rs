fn main() {
    std::process::exit(ttpp_cli::run(std::env::args_os()));
}
