fn main() {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("MCBW_LOG").unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .init();
    if let Err(e) = mcbw_cli::run_from(std::env::args_os(), &mut std::io::stdout()) {
        eprintln!("{}", e.to_json_line());
        std::process::exit(e.exit);
    }
}
