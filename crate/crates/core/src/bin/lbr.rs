fn main() {
    env_logger::init();
    std::process::exit(lbr::cli::run(std::env::args_os()));
}
