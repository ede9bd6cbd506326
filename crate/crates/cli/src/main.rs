fn main() {
    std::process::exit(diffpo_cli::run(std::env::args_os()));
}
