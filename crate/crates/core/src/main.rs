fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stdout)
        .init();
    std::process::exit(plvm::cli::main_with_args(std::env::args_os()));
}
