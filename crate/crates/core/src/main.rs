fn main() {
    std::process::exit(zipf_atlas::cli::run(std::env::args_os()));
}
