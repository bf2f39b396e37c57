fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter("TKKNN_LOG")).init();
    std::process::exit(tkknn::cli::main_with_args(std::env::args_os()));
}
