fn main() {
    std::process::exit(hive_core::cli::run(std::env::args_os()));
}
