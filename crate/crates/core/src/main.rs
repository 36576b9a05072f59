fn main() {
    std::process::exit(rmt_core::cli::run(std::env::args_os()));
}
