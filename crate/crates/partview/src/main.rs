fn main() {
    std::process::exit(partview::run_cli());
}
