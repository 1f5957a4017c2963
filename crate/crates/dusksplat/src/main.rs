fn main() {
    env_logger::init();
    std::process::exit(dusksplat::cli::run());
}
