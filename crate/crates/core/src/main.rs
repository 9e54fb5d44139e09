fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("KGREC_LOG", "info")).init();
    std::process::exit(kgrec::cli::run_from(std::env::args_os()));
}
