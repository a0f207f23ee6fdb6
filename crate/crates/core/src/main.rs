fn main() {
    std::process::exit(sent2span::cli::run_command(std::env::args_os()));
}
