fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(ctvr::cli::run_cli(&args));
}
