fn main() {
    std::process::exit(eegfm_cli::run(std::env::args_os()));
}
