fn main() {
    std::process::exit(rescorer::cli::run_cli());
}
