fn main() {
    std::process::exit(rsid_cli::run(std::env::args_os()));
}
