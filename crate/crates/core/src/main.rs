fn main() {
    std::process::exit(c2p_core::cli::run(std::env::args_os()));
}
