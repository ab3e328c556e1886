fn main() {
    let quiet = std::env::args().any(|a| a == "-q" || a == "--quiet");
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if quiet { "error" } else { "info" }))
        .format_timestamp(None)
        .init();
    std::process::exit(diffcl::cli::run_command(std::env::args_os()));
}
